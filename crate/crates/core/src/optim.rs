//! Momentum SGD with L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    /// Zeroed momentum buffers matching `params`.
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Self {
        OptimizerState {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v <- μ v - lr (g + wd w)`, then `w <- w + v`, for every parameter.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} parameter tensors", state.velocity.len()),
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    let SgdConfig {
        learning_rate: lr,
        momentum: mu,
        weight_decay: wd,
        ..
    } = state.config;
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        g.expect_dims("sgd_step", w.dims())?;
        v.expect_dims("sgd_step", w.dims())?;
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi - lr * (gi + wd * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, mu: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
            batch_size: 1,
        }
    }

    #[test]
    fn plain_step() {
        let mut w = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(cfg(0.1, 0.0, 0.0), &w);
        sgd_step(&mut w, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert!((w[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut w = vec![Tensor::vector(&[0.3, -2.0])];
        let mut st = OptimizerState::new(cfg(0.5, 0.9, 0.0), &w);
        sgd_step(&mut w, &[Tensor::vector(&[0.0, 0.0])], &mut st).unwrap();
        assert_eq!(w[0].data(), &[0.3, -2.0]);
    }

    #[test]
    fn momentum_recursion() {
        let mut w = vec![Tensor::scalar(0.0)];
        let mut st = OptimizerState::new(cfg(0.1, 0.9, 0.0), &w);
        let g = [Tensor::scalar(1.0)];
        sgd_step(&mut w, &g, &mut st).unwrap();
        assert!((st.velocity()[0].data()[0] + 0.1).abs() < 1e-15);
        assert!((w[0].data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut w, &g, &mut st).unwrap();
        assert!((st.velocity()[0].data()[0] + 0.19).abs() < 1e-15);
        assert!((w[0].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn dims_must_agree() {
        let mut w = vec![Tensor::scalar(0.0)];
        let mut st = OptimizerState::new(SgdConfig::default(), &w);
        assert!(sgd_step(&mut w, &[Tensor::vector(&[1.0, 2.0])], &mut st).is_err());
        assert!(sgd_step(&mut w, &[], &mut st).is_err());
    }
}
