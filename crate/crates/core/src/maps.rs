//! Per-landmark probability maps: the Chebyshev target distribution, the
//! spatial softmax over a landmark's logit map, and the cross-entropy
//! between the two.

use crate::error::{Error, Result};
use crate::shape::{LandmarkShape, Point};
use crate::tensor::{Dims, Tensor};

/// Ground-truth distribution for one landmark over an `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    height: usize,
    width: usize,
    q: Vec<f64>,
}

impl TargetMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.q[row * self.width + col]
    }
}

/// Builds `q[row, col] ∝ 0.5^max(|cx - col|, |cy - row|)` normalized to sum 1,
/// where `(cx, cy)` is the landmark's rounded, border-clamped cell.
pub fn build_target_map(landmark: Point, height: usize, width: usize) -> Result<TargetMap> {
    if height == 0 || width == 0 {
        return Err(Error::Contract(format!(
            "target map needs positive dimensions, got {height}x{width}"
        )));
    }
    let (cx, cy) = landmark.grid_cell(width, height);
    // Powers of one half are exact in binary floating point, so the table
    // below carries no rounding before normalization.
    let max_d = height.max(width);
    let pow: Vec<f64> = (0..max_d).map(|d| 0.5f64.powi(d as i32)).collect();
    let mut q = Vec::with_capacity(height * width);
    for row in 0..height {
        let dy = row.abs_diff(cy);
        for col in 0..width {
            q.push(pow[dy.max(col.abs_diff(cx))]);
        }
    }
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= z);
    Ok(TargetMap { height, width, q })
}

/// Stacks one target map per landmark into a `1 x p x height x width` tensor.
pub fn target_tensor(shape: &LandmarkShape, height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(shape.len() * height * width);
    for &p in shape.points() {
        data.extend_from_slice(&build_target_map(p, height, width)?.q);
    }
    Tensor::from_vec(Dims::new(1, shape.len(), height, width), data)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logits.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// `softmax(A)` over a single map, computed with max-subtraction.
pub fn spatial_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Applies [`spatial_softmax`] to every `(item, channel)` plane.
pub fn spatial_softmax_tensor(logits: &Tensor) -> Tensor {
    let d = logits.dims();
    let mut out = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let p = spatial_softmax(logits.plane(n, c));
            out.plane_mut(n, c).copy_from_slice(&p);
        }
    }
    out
}

/// Backward of a per-plane softmax given its output `probs`.
pub(crate) fn spatial_softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let d = probs.dims();
    let mut g = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let p = probs.plane(n, c);
            let go = grad_out.plane(n, c);
            let dot: f64 = p.iter().zip(go).map(|(a, b)| a * b).sum();
            for ((gv, pv), gov) in g.plane_mut(n, c).iter_mut().zip(p).zip(go) {
                *gv = pv * (gov - dot);
            }
        }
    }
    g
}

/// Cross-entropy `-Σ q log softmax(A)` and its gradient `softmax(A)·Σq - q`.
pub fn distribution_softmax_loss(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::shape(
            "distribution_softmax_loss",
            logits.len(),
            target.len(),
        ));
    }
    let lse = log_sum_exp(logits);
    let q_mass: f64 = target.iter().sum();
    let loss = target
        .iter()
        .zip(logits)
        .filter(|(q, _)| **q != 0.0)
        .map(|(q, a)| -q * (a - lse))
        .sum();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(a, q)| (a - lse).exp() * q_mass - q)
        .collect();
    Ok((loss, grad))
}

/// Shannon entropy `-Σ q ln q` (0 ln 0 taken as 0).
pub fn entropy(q: &[f64]) -> f64 {
    q.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

/// `(col, row)` of the largest value; ties resolve to the smallest row-major index.
pub fn argmax_location(map: &[f64], width: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    (best % width, best / width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn target_map_center_of_3x3() {
        let t = build_target_map(Point::new(1.0, 1.0), 3, 3).unwrap();
        for row in 0..3 {
            for col in 0..3 {
                let expect = if (row, col) == (1, 1) { 0.2 } else { 0.1 };
                assert!((t.at(col, row) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_map_small_cases() {
        assert_eq!(build_target_map(Point::new(0.0, 0.0), 1, 1).unwrap().values(), &[1.0]);
        let t = build_target_map(Point::new(0.0, 0.0), 2, 2).unwrap();
        for (v, e) in t.values().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!(build_target_map(Point::new(0.0, 0.0), 0, 3).is_err());
    }

    #[test]
    fn target_map_argmax_is_landmark() {
        let t = build_target_map(Point::new(4.0, 5.0), 9, 7).unwrap();
        assert_eq!(argmax_location(t.values(), 7), (4, 5));
        let clamped = build_target_map(Point::new(-2.0, 40.0), 6, 6).unwrap();
        assert_eq!(argmax_location(clamped.values(), 6), (0, 5));
    }

    #[test]
    fn softmax_examples() {
        let u = spatial_softmax(&[2.5; 6]);
        assert!(u.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let p = spatial_softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let big = spatial_softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let (l, g) = distribution_softmax_loss(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[0] + 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);

        let q = build_target_map(Point::new(1.0, 2.0), 4, 4).unwrap();
        let a: Vec<f64> = q.values().iter().map(|v| v.ln() + 7.0).collect();
        let (l, g) = distribution_softmax_loss(&a, q.values()).unwrap();
        assert!((l - entropy(q.values())).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax_location(&[0.3; 12], 4), (0, 0));
        let mut m = vec![0.0; 20];
        m[2 * 5 + 3] = 1.0;
        assert_eq!(argmax_location(&m, 5), (3, 2));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(a in proptest::collection::vec(-30.0f64..30.0, 1..30), s in -100.0f64..100.0) {
            let p = spatial_softmax(&a);
            let shifted: Vec<f64> = a.iter().map(|v| v + s).collect();
            let ps = spatial_softmax(&shifted);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in p.iter().zip(&ps) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x > 0.0);
            }
        }
    }
}
