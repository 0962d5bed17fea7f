//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p dcr-core --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcr_core::cascade::{fit_stage_closed_form, train_cascade_sequential, Ridge};
use dcr_core::checkpoint::Checkpoint;
use dcr_core::config::{RunConfig, SyntheticData};
use dcr_core::data::{
    augment_sample, parse_pts, write_pts, AugmentConfig, BBox, GrayImage, Sample, SynthConfig, MIRROR_68,
};
use dcr_core::kernels::{deconv2d_forward, maxpool2_forward};
use dcr_core::maps::{build_target_map, distribution_softmax_loss, entropy};
use dcr_core::metrics::{ced, mean_error, EyeIndices};
use dcr_core::pipeline::{self, TrainOutcome};
use dcr_core::shape_space::mean_shape;
use dcr_core::sip::{shape_indexed_pool, shape_indexed_pool_backward, SipConfig};
use dcr_core::{Dims, LandmarkShape, Point, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let rows = pipeline::gradcheck_suite(None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let linear_ok = rows
        .iter()
        .filter(|r| ["conv2d", "deconv2d", "fully_connected"].contains(&r.op))
        .all(|r| r.max_rel_error < 1e-8);
    check(
        failed.is_empty() && linear_ok && rows.len() == 9 && secs < 120.0,
        format!("{} ops, worst rel error {worst:.2e}, {secs:.2}s", rows.len()),
        format!("failed ops {failed:?}, linear_ok={linear_ok}, {secs:.2}s"),
    )
}

/// Independent window scan over the rounded, clamped landmark.
fn brute_sip(fm: &Tensor, shape: &LandmarkShape, b: usize) -> Vec<f64> {
    let d = fm.dims();
    let mut out = Vec::new();
    for p in shape.points() {
        let col = ((p.x + 0.5).floor().max(0.0) as usize).min(d.w - 1);
        let row = ((p.y + 0.5).floor().max(0.0) as usize).min(d.h - 1);
        for c in 0..d.c {
            let mut best = f64::NEG_INFINITY;
            for y in row.saturating_sub(b)..=(row + b).min(d.h - 1) {
                for x in col.saturating_sub(b)..=(col + b).min(d.w - 1) {
                    best = best.max(fm[[0, c, y, x]]);
                }
            }
            out.push(best);
        }
    }
    out
}

fn c2_sip_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_mass = 0.0f64;
    for case in 0..200 {
        let (m, h, w) = (rng.random_range(1..5), rng.random_range(1..13), rng.random_range(1..13));
        let p = rng.random_range(1..5);
        let b = rng.random_range(0..4);
        // Coarse values make ties common.
        let fm = Tensor::from_vec(
            Dims::new(1, m, h, w),
            (0..m * h * w).map(|_| rng.random_range(0..6) as f64).collect(),
        )
        .unwrap();
        let shape = LandmarkShape::new(
            (0..p)
                .map(|_| Point::new(rng.random_range(-3.0..w as f64 + 3.0), rng.random_range(-3.0..h as f64 + 3.0)))
                .collect(),
        );
        let cfg = SipConfig::with_half_width(b);
        let (out, record) = shape_indexed_pool(&fm, &shape, &cfg).map_err(|e| e.to_string())?;
        if out != brute_sip(&fm, &shape, b) {
            return Err(format!("case {case}: forward differs from window scan"));
        }
        let upstream: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = shape_indexed_pool_backward(&upstream, &record).map_err(|e| e.to_string())?;
        let mass = (g.sum() - upstream.iter().sum::<f64>()).abs();
        worst_mass = worst_mass.max(mass);
        if mass > 1e-12 {
            return Err(format!("case {case}: backward mass off by {mass:e}"));
        }
        for (k, &idx) in record.argmax().iter().enumerate() {
            if fm.data()[idx] != out[k] {
                return Err(format!("case {case}: recorded argmax does not hold the max"));
            }
        }
    }
    Ok(format!("200 configurations exact, worst mass error {worst_mass:.1e}"))
}

fn c3_target_map() -> Outcome {
    let q = build_target_map(Point::new(1.0, 1.0), 3, 3).map_err(|e| e.to_string())?;
    for row in 0..3 {
        for col in 0..3 {
            let want = if (row, col) == (1, 1) { 0.2 } else { 0.1 };
            if (q.at(col, row) - want).abs() > 1e-12 {
                return Err(format!("3x3 entry ({col},{row}) = {}", q.at(col, row)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (lx, ly) = (rng.random_range(0..w), rng.random_range(0..h));
        let q = build_target_map(Point::new(lx as f64, ly as f64), h, w).map_err(|e| e.to_string())?;
        let sum: f64 = q.values().iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: sum {sum}"));
        }
        let cheb = |x: usize, y: usize| x.abs_diff(lx).max(y.abs_diff(ly));
        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
        for y in 0..h {
            for x in 0..w {
                if q.at(x, y) > best {
                    best = q.at(x, y);
                    at = (x, y);
                }
                for (x2, y2) in [(x + 1, y), (x, y + 1), (x + 1, y + 1)] {
                    if x2 < w && y2 < h {
                        let (d1, d2) = (cheb(x, y), cheb(x2, y2));
                        let (v1, v2) = (q.at(x, y), q.at(x2, y2));
                        let consistent = match d1.cmp(&d2) {
                            std::cmp::Ordering::Less => v1 > v2,
                            std::cmp::Ordering::Greater => v1 < v2,
                            std::cmp::Ordering::Equal => (v1 - v2).abs() < 1e-15,
                        };
                        if !consistent {
                            return Err(format!("case {case}: not monotone in Chebyshev distance"));
                        }
                    }
                }
            }
        }
        if at != (lx, ly) {
            return Err(format!("case {case}: argmax {at:?} != landmark ({lx},{ly})"));
        }
    }
    Ok("3x3 example exact; 100 random maps normalized, peaked and monotone".into())
}

fn c4_loss_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_gap = f64::INFINITY;
    let mut max_eq = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..50);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-6).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (loss, _) = distribution_softmax_loss(&a, &q).map_err(|e| e.to_string())?;
        let gap = loss - entropy(&q);
        min_gap = min_gap.min(gap);
        if gap < -1e-9 {
            return Err(format!("case {case}: loss below entropy by {:e}", -gap));
        }
        let log_q: Vec<f64> = q.iter().map(|v| v.ln()).collect();
        let (at_opt, _) = distribution_softmax_loss(&log_q, &q).map_err(|e| e.to_string())?;
        let eq = (at_opt - entropy(&q)).abs();
        max_eq = max_eq.max(eq);
        if eq > 1e-9 {
            return Err(format!("case {case}: loss at log Q differs from entropy by {eq:e}"));
        }
    }
    Ok(format!("1000 pairs, min gap {min_gap:.2e}, max equality error {max_eq:.1e}"))
}

fn c5_shape_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let (h, w) = (4 * rng.random_range(1..17), 4 * rng.random_range(1..17));
        let x = Tensor::uniform(Dims::new(1, 2, h, w), -1.0, 1.0, &mut rng);
        let (p1, _) = maxpool2_forward(&x).map_err(|e| e.to_string())?;
        let (p2, _) = maxpool2_forward(&p1).map_err(|e| e.to_string())?;
        let k1 = Tensor::uniform(Dims::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let k2 = Tensor::uniform(Dims::new(3, 2, 4, 4), -1.0, 1.0, &mut rng);
        let d1 = deconv2d_forward(&p2, &k1, None).map_err(|e| e.to_string())?;
        let d2 = deconv2d_forward(&d1, &k2, None).map_err(|e| e.to_string())?;
        let od = d2.dims();
        if (od.h, od.w) != (h, w) {
            return Err(format!("case {case}: {h}x{w} came back as {}x{}", od.h, od.w));
        }
    }
    Ok("50 random sizes restored".into())
}

fn c6_augmentation() -> Outcome {
    let cfg = AugmentConfig::default();
    let tiny = |i: usize| Sample {
        image: GrayImage::from_fn(4, 4, |x, y| ((x + y + i) % 3) as f64 / 2.0),
        shape: LandmarkShape::from_flat(&(0..136).map(|k| (k % 4) as f64).collect::<Vec<_>>()).unwrap(),
        bbox: BBox::new(0.5, 0.5, 3.0, 3.0),
    };
    let count = |n: usize| -> Result<usize, String> {
        let mut total = 0;
        for i in 0..n {
            total += augment_sample(&tiny(i), i, &cfg, 6).map_err(|e| e.to_string())?.len();
        }
        Ok(total)
    };
    let (one, lfpw, w300) = (count(1)?, count(811)?, count(3148)?);
    check(
        cfg.multiplicity() == 52 && one == 52 && lfpw == 42_172 && w300 == 163_696 && MIRROR_68[36] == 45,
        format!("multiplicity 52; 811 -> {lfpw}; 3148 -> {w300}"),
        format!("multiplicity {} one={one} 811->{lfpw} 3148->{w300}", cfg.multiplicity()),
    )
}

fn nonincreasing(errors: &[f64]) -> bool {
    errors.windows(2).all(|w| w[1] <= w[0] + 1e-10)
}

fn c7_monotonicity(desk: &TrainOutcome) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let (n, m, p, s) = (rng.random_range(3..40), rng.random_range(1..4), rng.random_range(1..4), 10);
        let feats: Vec<Tensor> = (0..n)
            .map(|_| Tensor::uniform(Dims::new(1, m, s, s), -1.0, 1.0, &mut rng))
            .collect();
        let rand_shape = |rng: &mut ChaCha8Rng| {
            LandmarkShape::new((0..p).map(|_| Point::new(rng.random_range(0.0..9.0), rng.random_range(0.0..9.0))).collect())
        };
        let inits: Vec<_> = (0..n).map(|_| rand_shape(&mut rng)).collect();
        let truths: Vec<_> = (0..n).map(|_| rand_shape(&mut rng)).collect();
        let sip = SipConfig::with_half_width(rng.random_range(0..3));
        for ridge in [Ridge::Relative(1e-3), Ridge::Absolute(0.0), Ridge::Absolute(10.0)] {
            let (_, report) =
                train_cascade_sequential(&feats, &inits, &truths, 8, &sip, ridge).map_err(|e| e.to_string())?;
            if !nonincreasing(&report.stage_sq_errors) {
                return Err(format!("random case {case} {ridge:?}: {:?}", report.stage_sq_errors));
            }
        }
    }
    check(
        nonincreasing(&desk.stage_sq_errors),
        format!(
            "60 random training sets monotone; desk run {:.4} -> {:.4} (mean sq residual)",
            desk.stage_sq_errors[0],
            desk.stage_sq_errors.last().unwrap()
        ),
        format!("desk run stage errors {:?}", desk.stage_sq_errors),
    )
}

struct DeskResult {
    outcome: TrainOutcome,
    test: Vec<Sample>,
}

fn c8_end_to_end(desk: &DeskResult, seconds: f64) -> Outcome {
    let cfg = RunConfig::desk();
    let eyes = cfg.eye_indices();
    let ck = &desk.outcome.checkpoint;
    let preds = pipeline::predict_all(ck, &desk.test).map_err(|e| e.to_string())?;
    let truths: Vec<LandmarkShape> = desk.test.iter().map(|s| s.shape.clone()).collect();
    let err = |shapes: Vec<LandmarkShape>| mean_error(&shapes, &truths, &eyes).map(|r| r.1).map_err(|e| e.to_string());
    let mask = err(preds.iter().map(|p| p.mask_shape.clone()).collect())?;
    let init = err(preds.iter().map(|p| p.init_shape.clone()).collect())?;
    let fin = err(preds.iter().map(|p| p.final_shape().clone()).collect())?;

    // Mean shape of the working-frame training shapes, mapped to each test image.
    let (train, _) = pipeline::load_datasets(&cfg).map_err(|e| e.to_string())?;
    let prepared = pipeline::prepare_all(&train, cfg.input_size, cfg.pad_fraction).map_err(|e| e.to_string())?;
    let mean = mean_shape(&prepared.iter().map(|p| p.shape.clone()).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut mean_preds = Vec::new();
    for s in &desk.test {
        let frame = pipeline::prepare(s, cfg.input_size, cfg.pad_fraction).map_err(|e| e.to_string())?.frame;
        mean_preds.push(frame.inverse().map_err(|e| e.to_string())?.apply_shape(&mean));
    }
    let mean_err = err(mean_preds)?;

    let (a, b, c, t) = (mask < 0.15, init < mean_err, fin <= 0.8 * init, seconds < 900.0);
    let detail = format!(
        "mask {mask:.4} (<0.15 {a}), init {init:.4} vs mean shape {mean_err:.4} ({b}), cascade {fin:.4} = {:.3}x init (<=0.8 {c}), {seconds:.0}s",
        fin / init
    );
    check(a && b && c && t, detail.clone(), detail)
}

fn c9_linear_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, m, p, s) = (40, 3, 3, 12);
    let cfg = SipConfig::with_half_width(2);
    let mut phis = Vec::new();
    let mut residuals = Vec::new();
    let d = m * p;
    let r: Vec<f64> = (0..2 * p * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let bias: Vec<f64> = (0..2 * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..n {
        let fm = Tensor::uniform(Dims::new(1, m, s, s), -1.0, 1.0, &mut rng);
        let init = LandmarkShape::new((0..p).map(|_| Point::new(rng.random_range(0.0..11.0), rng.random_range(0.0..11.0))).collect());
        let (phi, _) = shape_indexed_pool(&fm, &init, &cfg).map_err(|e| e.to_string())?;
        let t: Vec<f64> = (0..2 * p)
            .map(|i| bias[i] + (0..d).map(|j| r[i * d + j] * phi[j]).sum::<f64>())
            .collect();
        phis.push(phi);
        residuals.push(t);
    }
    let stage = fit_stage_closed_form(&phis, &residuals, 0.0, 0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (phi, t) in phis.iter().zip(&residuals) {
        for i in 0..2 * p {
            let pred = stage.bias()[i] + (0..d).map(|j| stage.weights()[i * d + j] * phi[j]).sum::<f64>();
            worst = worst.max((pred - t[i]).abs());
        }
    }
    check(
        worst < 1e-8,
        format!("max residual {worst:.2e} after one stage"),
        format!("max residual {worst:.2e}"),
    )
}

fn small_config() -> RunConfig {
    RunConfig {
        input_size: 32,
        candidates: 8,
        stages: 3,
        epochs: 2,
        synthetic: Some(SyntheticData {
            train: 16,
            test: 4,
            seed: 10,
            render: SynthConfig {
                canvas: 48,
                head_radius: 12.0,
                noise: 0.02,
            },
        }),
        ..RunConfig::desk()
    }
}

fn c10_determinism(desk: &DeskResult) -> Outcome {
    let cfg = small_config();
    let (train, _) = pipeline::load_datasets(&cfg).map_err(|e| e.to_string())?;
    let a = pipeline::train(&cfg, &train, &mut |_: &str| {}).map_err(|e| e.to_string())?;
    let b = pipeline::train(&cfg, &train, &mut |_: &str| {}).map_err(|e| e.to_string())?;
    if a.checkpoint.encode() != b.checkpoint.encode() {
        return Err("two fixed-seed runs produced different checkpoints".into());
    }

    let ck = &desk.outcome.checkpoint;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("desk.ckpt");
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let before = pipeline::predict_all(ck, &desk.test).map_err(|e| e.to_string())?;
    let after = pipeline::predict_all(&loaded, &desk.test).map_err(|e| e.to_string())?;
    let bits = |ps: &[pipeline::Prediction]| -> Vec<u64> {
        ps.iter()
            .flat_map(|p| p.final_shape().to_flat())
            .map(f64::to_bits)
            .collect()
    };
    if bits(&before) != bits(&after) {
        return Err("predictions changed across checkpoint save/load".into());
    }

    for s in &desk.test {
        let text = write_pts(&s.shape);
        let parsed = parse_pts(&text).map_err(|e| e.to_string())?;
        if write_pts(&parsed) != text {
            return Err("pts text did not round-trip".into());
        }
    }
    let grid = LandmarkShape::from_pairs(&[(12.25, 7.5), (0.0, 99.125)]);
    if parse_pts(&write_pts(&grid)).map_err(|e| e.to_string())? != grid {
        return Err("pts shape did not round-trip".into());
    }
    Ok(format!(
        "identical checkpoints ({} bytes), bit-identical predictions after reload, pts round trips",
        a.checkpoint.encode().len()
    ))
}

fn c11_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eyes = EyeIndices::synth5();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..10);
        let shape = |rng: &mut ChaCha8Rng| {
            LandmarkShape::new((0..5).map(|_| Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect())
        };
        let truths: Vec<_> = (0..n).map(|_| shape(&mut rng)).collect();
        let preds: Vec<_> = (0..n).map(|_| shape(&mut rng)).collect();
        let (theta, s) = (rng.random_range(-3.0..3.0f64), rng.random_range(0.1..10.0));
        let (tx, ty) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let sim = |sh: &LandmarkShape| {
            sh.map(|p| {
                let (sn, cs) = theta.sin_cos();
                Point::new(s * (cs * p.x - sn * p.y) + tx, s * (sn * p.x + cs * p.y) + ty)
            })
        };
        let (e1, _) = mean_error(&preds, &truths, &eyes).map_err(|e| e.to_string())?;
        let moved_p: Vec<_> = preds.iter().map(sim).collect();
        let moved_t: Vec<_> = truths.iter().map(sim).collect();
        let (e2, _) = mean_error(&moved_p, &moved_t, &eyes).map_err(|e| e.to_string())?;
        for (a, b) in e1.iter().zip(&e2) {
            worst = worst.max((a - b).abs());
        }
        let (self_err, self_mean) = mean_error(&truths, &truths, &eyes).map_err(|e| e.to_string())?;
        if self_mean != 0.0 || self_err.iter().any(|&e| e != 0.0) {
            return Err("mean_error(gt, gt) is not exactly 0".into());
        }
    }
    if worst > 1e-9 {
        return Err(format!("similarity invariance violated by {worst:e}"));
    }
    for case in 0..200 {
        let n = rng.random_range(1..50);
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
        let mut th: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(-0.1..0.4)).collect();
        th.sort_by(f64::total_cmp);
        let curve = ced(&errors, &th).map_err(|e| e.to_string())?;
        if curve.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(format!("case {case}: CED decreases"));
        }
        let max = errors.iter().cloned().fold(f64::MIN, f64::max);
        let min = errors.iter().cloned().fold(f64::MAX, f64::min);
        let ends = ced(&errors, &[min - 1e-12, max, f64::INFINITY]).map_err(|e| e.to_string())?;
        if ends[0].1 != 0.0 || ends[1].1 != 1.0 || ends[2].1 != 1.0 {
            return Err(format!("case {case}: CED endpoints {ends:?}"));
        }
    }
    Ok(format!("similarity invariance within {worst:.1e}; 200 CED curves monotone with exact endpoints"))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient suite", c1_gradients()));
    results.push((2, "SIP oracle", c2_sip_oracle()));
    results.push((3, "target map", c3_target_map()));
    results.push((4, "loss bound", c4_loss_bound()));
    results.push((5, "shape contract", c5_shape_contract()));
    results.push((6, "augmentation multiplicity", c6_augmentation()));

    let cfg = RunConfig::desk();
    let start = Instant::now();
    let desk = pipeline::load_datasets(&cfg).and_then(|(train, test)| {
        pipeline::train(&cfg, &train, &mut |line: &str| eprintln!("  {line}")).map(|outcome| DeskResult { outcome, test })
    });
    let seconds = start.elapsed().as_secs_f64();
    match &desk {
        Ok(d) => {
            results.push((7, "cascade monotonicity", c7_monotonicity(&d.outcome)));
            results.push((8, "synthetic end-to-end", c8_end_to_end(d, seconds)));
        }
        Err(e) => {
            results.push((7, "cascade monotonicity", Err(format!("desk training failed: {e}"))));
            results.push((8, "synthetic end-to-end", Err(format!("desk training failed: {e}"))));
        }
    }
    results.push((9, "noiseless linear oracle", c9_linear_oracle()));
    match &desk {
        Ok(d) => results.push((10, "determinism and persistence", c10_determinism(d))),
        Err(e) => results.push((10, "determinism and persistence", Err(format!("desk training failed: {e}")))),
    }
    results.push((11, "metrics", c11_metrics()));

    let mut failures = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", results.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
