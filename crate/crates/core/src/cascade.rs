//! Cascaded linear shape regression on shape-indexed features.
//!
//! Stage `k` maps the pooled features at the current estimate to a shape
//! increment, `ΔS = R φ(S) + b`, and the estimate advances by that
//! increment. Stages are fit one after another by ridge least squares on
//! the residuals left by the previous stages (the default), or refined
//! jointly by gradient descent as fully-connected layers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::shape::LandmarkShape;
use crate::sip::{shape_indexed_pool, SipConfig};
use crate::tensor::{Dims, Tensor};

/// One linear stage: `rows = 2p`, `cols = M·p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    pub index: usize,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl CascadeStage {
    pub fn new(index: usize, rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::shape("CascadeStage", format!("{rows}x{cols} weights"), weights.len()));
        }
        if bias.len() != rows {
            return Err(Error::shape("CascadeStage", format!("bias of length {rows}"), bias.len()));
        }
        if rows % 2 != 0 {
            return Err(Error::shape("CascadeStage", "even row count (2p)", rows));
        }
        Ok(CascadeStage {
            index,
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn zeros(index: usize, rows: usize, cols: usize) -> Self {
        CascadeStage {
            index,
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major `R`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `R` as a `1x1xrowsxcols` tensor and `b` as `1x1x1xrows`.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        (
            Tensor::matrix(self.rows, self.cols, self.weights.clone()).expect("stage dims"),
            Tensor::vector(&self.bias),
        )
    }

    pub fn from_tensors(index: usize, weights: &Tensor, bias: &Tensor) -> Result<Self> {
        let d = weights.dims();
        CascadeStage::new(index, d.h, d.w, weights.data().to_vec(), bias.data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    stages: Vec<CascadeStage>,
    sip: SipConfig,
}

impl CascadeModel {
    pub fn new(stages: Vec<CascadeStage>, sip: SipConfig) -> Result<Self> {
        let first = stages
            .first()
            .ok_or_else(|| Error::Config("a cascade needs at least one stage".into()))?;
        let (rows, cols) = (first.rows, first.cols);
        if stages.iter().any(|s| s.rows != rows || s.cols != cols) {
            return Err(Error::Contract("cascade stages disagree on dimensions".into()));
        }
        if cols % (rows / 2) != 0 {
            return Err(Error::Contract(format!(
                "stage columns {cols} are not a multiple of the landmark count {}",
                rows / 2
            )));
        }
        Ok(CascadeModel { stages, sip })
    }

    pub fn stages(&self) -> &[CascadeStage] {
        &self.stages
    }

    pub fn sip(&self) -> &SipConfig {
        &self.sip
    }

    pub fn landmarks(&self) -> usize {
        self.stages[0].rows / 2
    }
}

/// `ΔS = R φ + b`, returned as per-landmark `(dx, dy)` pairs.
pub fn apply_stage(features: &[f64], stage: &CascadeStage) -> Result<LandmarkShape> {
    if features.len() != stage.cols {
        return Err(Error::shape("apply_stage", stage.cols, features.len()));
    }
    let delta: Vec<f64> = stage
        .weights
        .chunks_exact(stage.cols)
        .zip(&stage.bias)
        .map(|(row, b)| row.iter().zip(features).map(|(r, f)| r * f).sum::<f64>() + b)
        .collect();
    LandmarkShape::from_flat(&delta)
}

/// Runs every stage from `s0` on one image's feature maps. The trajectory
/// holds `K + 1` shapes, starting with `s0`.
pub fn run_cascade(
    featmaps: &Tensor,
    s0: &LandmarkShape,
    model: &CascadeModel,
) -> Result<(LandmarkShape, Vec<LandmarkShape>)> {
    let mut trajectory = Vec::with_capacity(model.stages.len() + 1);
    let mut current = s0.clone();
    trajectory.push(current.clone());
    for stage in &model.stages {
        let (phi, _) = shape_indexed_pool(featmaps, &current, &model.sip)?;
        let delta = apply_stage(&phi, stage)?;
        current = current.offset_by(&delta.to_flat())?;
        trajectory.push(current.clone());
    }
    Ok((current, trajectory))
}

/// Sum of squared coordinate residuals over all samples.
pub fn cascade_loss(predictions: &[LandmarkShape], truths: &[LandmarkShape]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("cascade_loss", predictions.len(), truths.len()));
    }
    predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| p.sq_distance(t))
        .sum()
}

/// `1e-3` times the mean per-column variance of `features`.
pub fn default_ridge(features: &[Vec<f64>]) -> f64 {
    1e-3 * mean_feature_variance(features)
}

pub fn mean_feature_variance(features: &[Vec<f64>]) -> f64 {
    let n = features.len();
    if n == 0 || features[0].is_empty() {
        return 0.0;
    }
    let d = features[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = features.iter().map(|f| f[j]).sum::<f64>() / n as f64;
        total += features.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / d as f64
}

/// Ridge least squares for one stage:
/// `min_{R,b} (1/n) Σ ||t_i - R φ_i - b||² + λ ||R||²`, with `b` unpenalized.
///
/// Solved on centred data. With `λ = 0` the minimum-norm solution is
/// taken from an SVD of the centred feature matrix.
pub fn fit_stage_closed_form(
    features: &[Vec<f64>],
    targets: &[Vec<f64>],
    lambda: f64,
    index: usize,
) -> Result<CascadeStage> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Contract("fitting a stage needs at least one sample".into()));
    }
    if targets.len() != n {
        return Err(Error::shape("fit_stage_closed_form", n, targets.len()));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let d = features[0].len();
    let t = targets[0].len();
    if features.iter().any(|f| f.len() != d) || targets.iter().any(|r| r.len() != t) {
        return Err(Error::Contract("ragged feature or target rows".into()));
    }

    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let y = DMatrix::from_fn(n, t, |i, j| targets[i][j]);
    let x_mean: DVector<f64> = x.row_mean().transpose();
    let y_mean: DVector<f64> = y.row_mean().transpose();
    let mut xc = x;
    let mut yc = y;
    for mut row in xc.row_iter_mut() {
        row -= x_mean.transpose();
    }
    for mut row in yc.row_iter_mut() {
        row -= y_mean.transpose();
    }

    // w: d x t, so that R = wᵀ.
    let w = if lambda > 0.0 {
        let inv_n = 1.0 / n as f64;
        let mut gram = xc.tr_mul(&xc) * inv_n;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.tr_mul(&yc) * inv_n;
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram
                .svd(true, true)
                .solve(&rhs, f64::EPSILON)
                .map_err(|e| Error::Contract(format!("ridge solve failed: {e}")))?,
        }
    } else {
        let svd = xc.svd(true, true);
        let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let tol = (max_sv * n.max(d) as f64 * f64::EPSILON).max(f64::MIN_POSITIVE);
        svd.solve(&yc, tol)
            .map_err(|e| Error::Contract(format!("least-squares solve failed: {e}")))?
    };

    let r = w.transpose();
    let bias = &y_mean - &r * &x_mean;
    let weights: Vec<f64> = (0..t).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
    CascadeStage::new(index, t, d, weights, bias.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// Multiple of the mean feature variance, recomputed per stage.
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-3)
    }
}

impl Ridge {
    fn resolve(self, features: &[Vec<f64>]) -> f64 {
        match self {
            Ridge::Relative(f) => f * mean_feature_variance(features),
            Ridge::Absolute(l) => l,
        }
    }
}

/// Training-set trajectory from [`train_cascade_sequential`].
#[derive(Debug, Clone)]
pub struct SequentialReport {
    /// Shapes of every sample after each stage; entry 0 is the initialization.
    pub stage_shapes: Vec<Vec<LandmarkShape>>,
    /// Mean squared residual per sample after each stage (same indexing).
    pub stage_sq_errors: Vec<f64>,
}

/// Fits `stages` regressors in sequence. `featmaps[i]` are the frozen
/// feature maps of sample `i`, `inits[i]` its starting shape and
/// `truths[i]` its ground truth, all in the feature-map frame.
pub fn train_cascade_sequential(
    featmaps: &[Tensor],
    inits: &[LandmarkShape],
    truths: &[LandmarkShape],
    stages: usize,
    sip: &SipConfig,
    ridge: Ridge,
) -> Result<(CascadeModel, SequentialReport)> {
    let n = featmaps.len();
    if n == 0 {
        return Err(Error::Contract("cascade training on an empty dataset".into()));
    }
    if stages == 0 {
        return Err(Error::Config("cascade stage count K must be at least 1".into()));
    }
    if inits.len() != n || truths.len() != n {
        return Err(Error::shape("train_cascade", n, format!("{} inits, {} truths", inits.len(), truths.len())));
    }
    let mut current = inits.to_vec();
    let mut report = SequentialReport {
        stage_shapes: vec![current.clone()],
        stage_sq_errors: vec![cascade_loss(&current, truths)? / n as f64],
    };
    let mut fitted = Vec::with_capacity(stages);
    for k in 0..stages {
        let mut phis = Vec::with_capacity(n);
        let mut residuals = Vec::with_capacity(n);
        for i in 0..n {
            let (phi, _) = shape_indexed_pool(&featmaps[i], &current[i], sip)?;
            phis.push(phi);
            residuals.push(current[i].residual_to(&truths[i])?);
        }
        let lambda = ridge.resolve(&phis);
        let stage = fit_stage_closed_form(&phis, &residuals, lambda, k)?;
        for (s, phi) in current.iter_mut().zip(&phis) {
            *s = s.offset_by(&apply_stage(phi, &stage)?.to_flat())?;
        }
        report.stage_sq_errors.push(cascade_loss(&current, truths)? / n as f64);
        report.stage_shapes.push(current.clone());
        fitted.push(stage);
    }
    Ok((CascadeModel::new(fitted, sip.clone())?, report))
}

/// Builds `Σ_k ||S* - S^{k+1}||²` on `g` for a batch, with the stages as
/// fully-connected layers. `init` and `truths` are `n x 1 x 1 x 2p`;
/// `stages` pairs each weight node with its bias node.
pub fn joint_cascade_loss(
    g: &mut Graph,
    features: Var,
    init: Var,
    truths: &Tensor,
    stages: &[(Var, Var)],
    sip: &SipConfig,
) -> Result<Var> {
    let mut shape = init;
    let mut total: Option<Var> = None;
    for &(w, b) in stages {
        let phi = g.shape_indexed_pool(features, shape, sip)?;
        let delta = g.fully_connected(phi, w, b)?;
        shape = g.add(shape, delta)?;
        let l = g.squared_error(shape, truths)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Config("a cascade needs at least one stage".into()))
}

/// Flat shapes stacked as `n x 1 x 1 x 2p`.
pub fn shapes_tensor(shapes: &[LandmarkShape]) -> Result<Tensor> {
    let p = shapes.first().map_or(0, LandmarkShape::len);
    let data = shapes.iter().flat_map(LandmarkShape::to_flat).collect();
    Tensor::from_vec(Dims::vector(shapes.len(), 2 * p), data)
}
