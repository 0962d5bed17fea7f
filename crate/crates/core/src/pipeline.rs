//! Training, prediction and evaluation on top of the individual modules.
//!
//! Training runs in three phases: the network and its landmark maps are
//! fitted by SGD, the shape space is clustered from the working-frame
//! training shapes, and the cascade is fitted on the frozen features
//! (optionally followed by joint fine-tuning). Progress is reported as
//! `key=value` lines through a caller-supplied sink.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::{joint_cascade_loss, run_cascade, shapes_tensor, train_cascade_sequential, CascadeModel, CascadeStage};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainingMode};
use crate::data::{augment_dataset, crop_and_resize, load_manifest, synth_faces, Affine, GrayImage, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_corrupted, DEFAULT_EPSILON};
use crate::graph::{Graph, Var};
use crate::maps::{spatial_softmax_tensor, target_tensor};
use crate::metrics::{mean_error, EvalReport, EyeIndices};
use crate::network::Network;
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::shape::LandmarkShape;
use crate::shape_space::{kmeans_shapes, predict_shape_from_maps, select_initialization, ShapeSpace};
use crate::sip::SipConfig;
use crate::tensor::{Dims, Tensor};

/// Receives one `key=value ...` line per event.
pub type LogSink<'a> = &'a mut dyn FnMut(&str);

/// A sample mapped into the working frame and ready for the network.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// `1 x 1 x T x T`, pixel values shifted by -0.5.
    pub input: Tensor,
    /// Ground truth in the working frame.
    pub shape: LandmarkShape,
    /// Original image coordinates to working frame.
    pub frame: Affine,
}

pub fn image_to_input(image: &GrayImage) -> Tensor {
    let data = image.data().iter().map(|v| v - 0.5).collect();
    Tensor::from_vec(Dims::new(1, 1, image.height(), image.width()), data).expect("image dims")
}

pub fn prepare(sample: &Sample, size: usize, pad_fraction: f64) -> Result<Prepared> {
    let c = crop_and_resize(sample, size, pad_fraction)?;
    Ok(Prepared {
        input: image_to_input(&c.sample.image),
        shape: c.sample.shape,
        frame: c.frame,
    })
}

pub fn prepare_all(samples: &[Sample], size: usize, pad_fraction: f64) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s, size, pad_fraction)).collect()
}

/// Training and test samples named by the configuration.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if let Some(syn) = &cfg.synthetic {
        let mut all = synth_faces(syn.train + syn.test, syn.seed, &syn.render);
        let test = all.split_off(syn.train);
        return Ok((all, test));
    }
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no train_manifest configured".into()))?;
    let train = load_manifest(train_path)?;
    let test = match &cfg.test_manifest {
        Some(p) => load_manifest(p)?,
        None => Vec::new(),
    };
    for (name, set) in [("train", &train), ("test", &test)] {
        if let Some(bad) = set.iter().find(|s| s.shape.len() != cfg.landmarks) {
            return Err(Error::Data(format!(
                "{name} sample has {} landmarks, config expects {}",
                bad.shape.len(),
                cfg.landmarks
            )));
        }
    }
    Ok((train, test))
}

fn stack_batch(data: &[Prepared], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> = idx.iter().map(|&i| data[i].input.clone()).collect();
    let targets = idx
        .iter()
        .map(|&i| {
            let d = data[i].input.dims();
            target_tensor(&data[i].shape, d.h, d.w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

fn collect_grads(g: &mut Graph, vars: &[Var], like: &[Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.dims())))
        .collect()
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Phase 1: SGD on the summed map loss, averaged over each mini-batch.
/// Returns the mean per-sample loss of every epoch.
pub fn train_masks(
    net: &mut Network,
    data: &[Prepared],
    sgd: SgdConfig,
    epochs: usize,
    lr_decay: f64,
    seed: u64,
    log: LogSink,
) -> Result<Vec<f64>> {
    let mut state = OptimizerState::new(sgd, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(data.len(), sgd.batch_size, &mut rng) {
            let (inputs, targets) = stack_batch(data, &batch)?;
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let x = g.constant(inputs);
            let out = net.forward(&mut g, x, &params)?;
            let loss = g.softmax_loss(out.logits, &targets)?;
            total += g.value(loss).data()[0];
            let mean = g.scale(loss, 1.0 / batch.len() as f64);
            g.backward(mean)?;
            let grads = collect_grads(&mut g, &params, net.params());
            sgd_step(net.params_mut(), &grads, &mut state)?;
        }
        let mean = total / data.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Contract(format!("map loss diverged at epoch {epoch}")));
        }
        log(&format!(
            "phase=masks epoch={epoch} loss={mean:.6} lr={:.6}",
            state.config.learning_rate
        ));
        losses.push(mean);
        state.config.learning_rate *= lr_decay;
    }
    Ok(losses)
}

/// Network pass for one prepared input: features, the shape read off the
/// probability maps, and the nearest shape-space candidate.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Tensor,
    pub mask_shape: LandmarkShape,
    pub init_index: usize,
    pub init_shape: LandmarkShape,
}

pub fn encode(net: &Network, space: &ShapeSpace, input: &Tensor) -> Result<Encoded> {
    let (features, logits) = net.infer(input)?;
    let mask_shape = predict_shape_from_maps(&spatial_softmax_tensor(&logits))?;
    let (init_index, init_shape, _) = select_initialization(&mask_shape, space)?;
    Ok(Encoded {
        features,
        mask_shape,
        init_index,
        init_shape,
    })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    /// Mean squared training residual, entry 0 before any stage.
    pub stage_sq_errors: Vec<f64>,
    /// Inter-pupil normalized training error with the same indexing.
    pub stage_mean_errors: Vec<f64>,
}

/// Runs all training phases on `train` (original coordinates).
pub fn train(cfg: &RunConfig, train: &[Sample], log: LogSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let augmented;
    let train = match cfg.augment_config() {
        Some(a) => {
            augmented = augment_dataset(train, &a, cfg.seed)?;
            log(&format!("phase=augment samples={} multiplicity={}", augmented.len(), a.multiplicity()));
            &augmented[..]
        }
        None => train,
    };
    let data = prepare_all(train, cfg.input_size, cfg.pad_fraction)?;
    let eyes = cfg.eye_indices();
    let truths: Vec<LandmarkShape> = data.iter().map(|d| d.shape.clone()).collect();

    let spec = cfg.network_spec()?;
    log(&format!(
        "phase=init samples={} input_size={} landmarks={} feature_channels={}",
        data.len(),
        cfg.input_size,
        cfg.landmarks,
        spec.feature_channels()
    ));
    let mut net = Network::init(spec, cfg.seed)?;
    let epoch_losses = train_masks(&mut net, &data, cfg.sgd, cfg.epochs, cfg.lr_decay, cfg.seed, log)?;

    let space = kmeans_shapes(&truths, cfg.candidates, cfg.seed, cfg.kmeans_iters)?;
    log(&format!("phase=shape_space candidates={}", space.len()));

    let (cascade, stage_sq_errors, stage_mean_errors) = fit_cascade(&net, &space, &data, cfg, &eyes, log)?;
    let cascade = match cfg.mode {
        TrainingMode::Sequential => cascade,
        TrainingMode::Joint => joint_finetune(&mut net, &space, cascade, &data, cfg, log)?,
    };

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            input_size: cfg.input_size,
            pad_fraction: cfg.pad_fraction,
            network: net,
            shape_space: space,
            cascade,
        },
        epoch_losses,
        stage_sq_errors,
        stage_mean_errors,
    })
}

type CascadeFit = (CascadeModel, Vec<f64>, Vec<f64>);

fn fit_cascade(
    net: &Network,
    space: &ShapeSpace,
    data: &[Prepared],
    cfg: &RunConfig,
    eyes: &EyeIndices,
    log: LogSink,
) -> Result<CascadeFit> {
    let mut feats = Vec::with_capacity(data.len());
    let mut inits = Vec::with_capacity(data.len());
    let mut masks = Vec::with_capacity(data.len());
    for d in data {
        let e = encode(net, space, &d.input)?;
        feats.push(e.features);
        inits.push(e.init_shape);
        masks.push(e.mask_shape);
    }
    let truths: Vec<LandmarkShape> = data.iter().map(|d| d.shape.clone()).collect();
    let (_, mask_err) = mean_error(&masks, &truths, eyes)?;
    log(&format!("phase=cascade train_mask_mean_error={mask_err:.6}"));

    let (model, report) = train_cascade_sequential(&feats, &inits, &truths, cfg.stages, &cfg.sip, cfg.ridge)?;
    let mut mean_errors = Vec::with_capacity(report.stage_shapes.len());
    for (k, (shapes, sq)) in report.stage_shapes.iter().zip(&report.stage_sq_errors).enumerate() {
        let (_, me) = mean_error(shapes, &truths, eyes)?;
        log(&format!("phase=cascade stage={k} train_sq_error={sq:.6} train_mean_error={me:.6}"));
        mean_errors.push(me);
    }
    Ok((model, report.stage_sq_errors, mean_errors))
}

/// SGD on network and cascade together under the map loss plus the
/// summed stage losses, starting from the sequential fit.
fn joint_finetune(
    net: &mut Network,
    space: &ShapeSpace,
    cascade: CascadeModel,
    data: &[Prepared],
    cfg: &RunConfig,
    log: LogSink,
) -> Result<CascadeModel> {
    let sgd = SgdConfig {
        learning_rate: cfg.joint_learning_rate,
        ..cfg.sgd
    };
    let sip = cascade.sip().clone();
    let mut stage_params: Vec<Tensor> = cascade
        .stages()
        .iter()
        .flat_map(|s| {
            let (w, b) = s.to_tensors();
            [w, b]
        })
        .collect();
    let inits = data
        .iter()
        .map(|d| Ok(encode(net, space, &d.input)?.init_shape))
        .collect::<Result<Vec<_>>>()?;
    let mut net_state = OptimizerState::new(sgd, net.params());
    let mut stage_state = OptimizerState::new(sgd, &stage_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a6f_696e);
    for epoch in 0..cfg.joint_epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(data.len(), sgd.batch_size, &mut rng) {
            let (inputs, targets) = stack_batch(data, &batch)?;
            let init = shapes_tensor(&batch.iter().map(|&i| inits[i].clone()).collect::<Vec<_>>())?;
            let truth = shapes_tensor(&batch.iter().map(|&i| data[i].shape.clone()).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let svars: Vec<Var> = stage_params.iter().map(|t| g.param(t.clone())).collect();
            let pairs: Vec<(Var, Var)> = svars.chunks(2).map(|c| (c[0], c[1])).collect();
            let x = g.constant(inputs);
            let out = net.forward(&mut g, x, &params)?;
            let mask_loss = g.softmax_loss(out.logits, &targets)?;
            let init_var = g.constant(init);
            let casc_loss = joint_cascade_loss(&mut g, out.features, init_var, &truth, &pairs, &sip)?;
            let both = g.add(mask_loss, casc_loss)?;
            total += g.value(both).data()[0];
            let loss = g.scale(both, 1.0 / batch.len() as f64);
            g.backward(loss)?;
            let grads = collect_grads(&mut g, &params, net.params());
            let sgrads = collect_grads(&mut g, &svars, &stage_params);
            sgd_step(net.params_mut(), &grads, &mut net_state)?;
            sgd_step(&mut stage_params, &sgrads, &mut stage_state)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Contract(format!("joint loss diverged at epoch {epoch}")));
        }
        log(&format!("phase=joint epoch={epoch} loss={mean:.6}"));
    }
    let stages = stage_params
        .chunks(2)
        .enumerate()
        .map(|(k, c)| CascadeStage::from_tensors(k, &c[0], &c[1]))
        .collect::<Result<Vec<_>>>()?;
    CascadeModel::new(stages, sip)
}

/// Predictions for one sample, in original image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask_shape: LandmarkShape,
    pub init_index: usize,
    pub init_shape: LandmarkShape,
    /// `S^0 .. S^K`.
    pub trajectory: Vec<LandmarkShape>,
}

impl Prediction {
    pub fn final_shape(&self) -> &LandmarkShape {
        self.trajectory.last().expect("trajectory has S^0")
    }
}

pub fn predict_sample(ck: &Checkpoint, sample: &Sample) -> Result<Prediction> {
    sample.bbox.validate()?;
    let prepared = prepare(sample, ck.input_size, ck.pad_fraction)?;
    let e = encode(&ck.network, &ck.shape_space, &prepared.input)?;
    let (_, trajectory) = run_cascade(&e.features, &e.init_shape, &ck.cascade)?;
    let back = prepared.frame.inverse()?;
    Ok(Prediction {
        mask_shape: back.apply_shape(&e.mask_shape),
        init_index: e.init_index,
        init_shape: back.apply_shape(&e.init_shape),
        trajectory: trajectory.iter().map(|s| back.apply_shape(s)).collect(),
    })
}

pub fn predict_all(ck: &Checkpoint, samples: &[Sample]) -> Result<Vec<Prediction>> {
    samples.iter().map(|s| predict_sample(ck, s)).collect()
}

pub fn evaluate(ck: &Checkpoint, samples: &[Sample], eyes: &EyeIndices, thresholds: &[f64]) -> Result<EvalReport> {
    let preds: Vec<LandmarkShape> = predict_all(ck, samples)?
        .iter()
        .map(|p| p.final_shape().clone())
        .collect();
    let truths: Vec<LandmarkShape> = samples.iter().map(|s| s.shape.clone()).collect();
    EvalReport::compute(&preds, &truths, eyes, thresholds)
}

/// One row of the gradient-check table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tolerance for ops that are linear in their inputs.
pub const LINEAR_TOLERANCE: f64 = 1e-8;
pub const NONLINEAR_TOLERANCE: f64 = 1e-4;

type CheckOp = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Values `offset + spacing·k` for a random permutation of `k`, so maxima
/// are unique and finite differences never change an argmax.
fn spaced(dims: Dims, spacing: f64, offset: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut vals: Vec<f64> = (0..dims.len()).map(|k| offset + spacing * k as f64).collect();
    vals.shuffle(rng);
    Tensor::from_vec(dims, vals).expect("dims")
}

fn gradcheck_cases() -> Vec<(&'static str, f64, CheckOp, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x67_7261_64);
    let mut cases: Vec<(&'static str, f64, CheckOp, Vec<Tensor>)> = Vec::new();

    // Weighted sums give each output element a distinct upstream gradient.
    let w = |d: Dims, rng: &mut ChaCha8Rng| Tensor::uniform(d, -1.0, 1.0, rng);

    let out = w(Dims::new(2, 3, 5, 4), &mut rng);
    cases.push((
        "conv2d",
        LINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, out.clone())
        }),
        vec![
            Tensor::uniform(Dims::new(2, 2, 5, 4), -1.0, 1.0, &mut rng),
            Tensor::uniform(Dims::new(3, 2, 3, 3), -1.0, 1.0, &mut rng),
            Tensor::uniform(Dims::vector(1, 3), -1.0, 1.0, &mut rng),
        ],
    ));

    let out = w(Dims::new(2, 2, 3, 4), &mut rng);
    cases.push((
        "maxpool2",
        NONLINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let y = g.maxpool2(v[0])?;
            g.weighted_sum(y, out.clone())
        }),
        vec![spaced(Dims::new(2, 2, 6, 8), 0.01, -0.5, &mut rng)],
    ));

    let out = w(Dims::new(1, 2, 6, 4), &mut rng);
    cases.push((
        "deconv2d",
        LINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let y = g.deconv2d(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, out.clone())
        }),
        vec![
            Tensor::uniform(Dims::new(1, 3, 3, 2), -1.0, 1.0, &mut rng),
            Tensor::uniform(Dims::new(3, 2, 4, 4), -1.0, 1.0, &mut rng),
            Tensor::uniform(Dims::vector(1, 2), -1.0, 1.0, &mut rng),
        ],
    ));

    let out = w(Dims::vector(3, 4), &mut rng);
    cases.push((
        "fully_connected",
        LINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let y = g.fully_connected(v[0], v[1], v[2])?;
            g.weighted_sum(y, out.clone())
        }),
        vec![
            Tensor::uniform(Dims::vector(3, 5), -1.0, 1.0, &mut rng),
            Tensor::uniform(Dims::new(1, 1, 4, 5), -1.0, 1.0, &mut rng),
            Tensor::uniform(Dims::vector(1, 4), -1.0, 1.0, &mut rng),
        ],
    ));

    // Inputs kept at least 0.05 away from the kink.
    let relu_in = Tensor::uniform(Dims::new(1, 2, 4, 4), 0.05, 1.0, &mut rng);
    let signs = Tensor::uniform(Dims::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
    let relu_in = Tensor::from_vec(
        relu_in.dims(),
        relu_in.data().iter().zip(signs.data()).map(|(a, s)| a * s.signum()).collect(),
    )
    .expect("dims");
    let out = w(Dims::new(1, 2, 4, 4), &mut rng);
    cases.push((
        "relu",
        NONLINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            g.weighted_sum(y, out.clone())
        }),
        vec![relu_in],
    ));

    let out = w(Dims::new(2, 2, 4, 5), &mut rng);
    cases.push((
        "spatial_softmax",
        NONLINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let y = g.spatial_softmax(v[0]);
            g.weighted_sum(y, out.clone())
        }),
        vec![Tensor::uniform(Dims::new(2, 2, 4, 5), -2.0, 2.0, &mut rng)],
    ));

    let q = {
        let shapes = [
            LandmarkShape::from_pairs(&[(1.0, 2.0), (4.0, 0.0)]),
            LandmarkShape::from_pairs(&[(0.0, 0.0), (2.0, 3.0)]),
        ];
        Tensor::stack(&[target_tensor(&shapes[0], 4, 5).expect("q"), target_tensor(&shapes[1], 4, 5).expect("q")])
            .expect("stack")
    };
    cases.push((
        "distribution_loss",
        NONLINEAR_TOLERANCE,
        Box::new(move |g, v| g.softmax_loss(v[0], &q)),
        vec![Tensor::uniform(Dims::new(2, 2, 4, 5), -2.0, 2.0, &mut rng)],
    ));

    let sip = SipConfig::with_half_width(1);
    let shapes = shapes_tensor(&[
        LandmarkShape::from_pairs(&[(1.0, 1.0), (4.0, 3.0), (0.0, 5.0)]),
        LandmarkShape::from_pairs(&[(2.0, 2.0), (2.0, 3.0), (5.0, 0.0)]),
    ])
    .expect("shapes");
    let out = w(Dims::vector(2, 3 * 3), &mut rng);
    let (sip_a, shapes_a) = (sip.clone(), shapes.clone());
    cases.push((
        "shape_indexed_pool",
        NONLINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let s = g.constant(shapes_a.clone());
            let y = g.shape_indexed_pool(v[0], s, &sip_a)?;
            g.weighted_sum(y, out.clone())
        }),
        vec![spaced(Dims::new(2, 3, 6, 6), 0.01, -0.5, &mut rng)],
    ));

    // Small stage weights keep every intermediate landmark well inside its
    // rounding cell, so SIP windows stay fixed under perturbation.
    let (m, p) = (2, 3);
    let truths = shapes_tensor(&[
        LandmarkShape::from_pairs(&[(1.5, 1.0), (4.0, 3.5), (0.5, 4.0)]),
        LandmarkShape::from_pairs(&[(2.0, 2.5), (3.0, 3.0), (4.5, 1.0)]),
    ])
    .expect("truths");
    let mut inputs = vec![spaced(Dims::new(2, m, 6, 6), 0.01, -0.3, &mut rng)];
    for _ in 0..2 {
        inputs.push(Tensor::uniform(Dims::new(1, 1, 2 * p, m * p), -0.02, 0.02, &mut rng));
        inputs.push(Tensor::uniform(Dims::vector(1, 2 * p), -0.02, 0.02, &mut rng));
    }
    cases.push((
        "cascade_joint",
        NONLINEAR_TOLERANCE,
        Box::new(move |g, v| {
            let init = g.constant(shapes.clone());
            let stages = [(v[1], v[2]), (v[3], v[4])];
            joint_cascade_loss(g, v[0], init, &truths, &stages, &sip)
        }),
        inputs,
    ));
    cases
}

/// Finite-difference check of every differentiable op. `corrupt` scales
/// all analytic gradients to exercise the failure path.
pub fn gradcheck_suite(corrupt: Option<f64>) -> Result<Vec<GradcheckRow>> {
    gradcheck_cases()
        .into_iter()
        .map(|(op, tolerance, f, inputs)| {
            let max_rel_error = match corrupt {
                Some(factor) => grad_check_corrupted(f, &inputs, DEFAULT_EPSILON, factor)?,
                None => grad_check(f, &inputs, DEFAULT_EPSILON)?,
            };
            Ok(GradcheckRow {
                op,
                max_rel_error,
                tolerance,
            })
        })
        .collect()
}
