//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the backward pass of `op` with central differences over every
/// element of every input. `op` receives one parameter node per input and
/// must return a scalar node. Returns the maximum relative error.
pub fn grad_check<F>(op: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    run(&op, inputs, epsilon, None)
}

/// [`grad_check`] with the backward pass deliberately scaled by `factor`.
#[doc(hidden)]
pub fn grad_check_corrupted<F>(op: F, inputs: &[Tensor], epsilon: f64, factor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    run(&op, inputs, epsilon, Some(factor))
}

fn evaluate<F>(op: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    scalar(&g, out)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!("grad_check op returned dims {}", t.dims())));
    }
    Ok(t.data()[0])
}

fn run<F>(op: &F, inputs: &[Tensor], epsilon: f64, corrupt: Option<f64>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(f) = corrupt {
        g.corrupt_backward(f);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
        .collect();

    let mut worst = 0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..probe[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + epsilon;
            let plus = evaluate(op, &probe)?;
            probe[k].data_mut()[i] = orig - epsilon;
            let minus = evaluate(op, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-3, 2e-3), 1e-3);
        assert_eq!(relative_error(10.0, 11.0), 1.0 / 11.0);
    }

    #[test]
    fn conv_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(Dims::new(1, 2, 6, 6), 1.0, &mut rng);
        let k = Tensor::randn(Dims::new(3, 2, 3, 3), 0.5, &mut rng);
        let w = Tensor::randn(Dims::new(1, 3, 6, 6), 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None)?;
                g.weighted_sum(y, w.clone())
            },
            &[x, k],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::vector(&[-1.3, 0.4, 2.2, -0.05, 0.9]);
        let w = Tensor::vector(&[0.3, -1.1, 0.7, 2.0, 1.5]);
        let err = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                g.weighted_sum(y, w.clone())
            },
            &[x],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::vector(&[1.5, -2.0]);
        let err = grad_check_corrupted(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            DEFAULT_EPSILON,
            1.5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
