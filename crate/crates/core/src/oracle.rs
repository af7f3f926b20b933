//! Brute-force reference computations used to audit the analytic code.
//!
//! Nothing here calls into the model's gradient or Hessian code: oracles see
//! the loss only as a black-box function of a flat parameter slice.

use crate::error::{invalid, Error, Result};
use crate::numerics::Rng;
use crate::stats::Estimate;

/// Central-difference gradient. With `h = None` each coordinate uses
/// `1e-5·(1 + |θᵢ|)`.
pub fn fd_gradient<F>(mut loss: F, theta: &[f64], h: Option<f64>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if matches!(h, Some(h) if h <= 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut t = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let hi = h.unwrap_or(1e-5 * (1.0 + theta[i].abs()));
        t[i] = theta[i] + hi;
        let up = loss(&t);
        t[i] = theta[i] - hi;
        let down = loss(&t);
        t[i] = theta[i];
        g.push((up - down) / (2.0 * hi));
    }
    Ok(g)
}

/// `Σᵢ [ℓ(θ+heᵢ) − 2ℓ(θ) + ℓ(θ−heᵢ)] / h²`. With `h = None` each
/// coordinate uses `1e-4·(1 + |θᵢ|)`.
pub fn fd_hessian_trace<F>(mut loss: F, theta: &[f64], h: Option<f64>) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    const MAX_PARAMS: usize = 500;
    if theta.len() > MAX_PARAMS {
        return Err(invalid(format!(
            "fd_hessian_trace loops over coordinates; {} > {MAX_PARAMS} parameters",
            theta.len()
        )));
    }
    if matches!(h, Some(h) if h <= 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let centre = loss(theta);
    let mut t = theta.to_vec();
    let mut tr = 0.0;
    for i in 0..theta.len() {
        let hi = h.unwrap_or(1e-4 * (1.0 + theta[i].abs()));
        t[i] = theta[i] + hi;
        let up = loss(&t);
        t[i] = theta[i] - hi;
        let down = loss(&t);
        t[i] = theta[i];
        tr += (up - 2.0 * centre + down) / (hi * hi);
    }
    Ok(tr)
}

/// Per-step learning rate for [`brute_n_step`]: a scalar or a dense
/// `dim × dim` matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRate {
    Scalar(f64),
    Dense { dim: usize, data: Vec<f64> },
}

impl StepRate {
    fn apply(&self, g: &[f64]) -> Vec<f64> {
        match self {
            StepRate::Scalar(eta) => g.iter().map(|v| eta * v).collect(),
            StepRate::Dense { dim, data } => (0..*dim)
                .map(|i| (0..*dim).map(|j| data[i * dim + j] * g[j]).sum())
                .collect(),
        }
    }
}

/// Literal gradient-descent loop `θ ← θ − lr·∇ℓ(θ)` repeated `n` times.
///
/// Fails with [`Error::Diverged`] once `‖θ‖ > 1e6` or on non-finite values.
pub fn brute_n_step<G>(mut grad: G, theta0: &[f64], lr: &StepRate, n: usize) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    if n == 0 {
        return Err(invalid("brute_n_step needs n >= 1"));
    }
    if let StepRate::Dense { dim, data } = lr {
        if *dim != theta0.len() || data.len() != dim * dim {
            return Err(invalid("dense step rate does not match the parameter count"));
        }
    }
    let mut theta = theta0.to_vec();
    for step in 0..n {
        let g = grad(&theta);
        let d = lr.apply(&g);
        for (t, v) in theta.iter_mut().zip(&d) {
            *t -= v;
        }
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e6 {
            return Err(Error::Diverged { step: step + 1, norm });
        }
    }
    Ok(theta)
}

/// Mean and standard error of a statistic over `trials` independent child
/// streams; used for null distributions.
pub fn monte_carlo_null<F>(rng: &Rng, trials: usize, mut statistic: F) -> Result<Estimate>
where
    F: FnMut(&mut Rng) -> Result<f64>,
{
    if trials == 0 {
        return Err(invalid("monte_carlo_null needs at least one trial"));
    }
    let xs = (0..trials)
        .map(|t| statistic(&mut rng.child(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&xs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|w| w[0] * w[0], &[3.0], None).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = fd_gradient(|_| 4.0, &[1.0, 2.0], None).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(fd_gradient(|w| w[0], &[1.0], Some(0.0)).is_err());
    }

    #[test]
    fn fd_hessian_trace_examples() {
        let t = fd_hessian_trace(|w| w[0] * w[0], &[0.7], None).unwrap();
        assert!((t - 2.0).abs() < 1e-6);
        let t = fd_hessian_trace(|w| 3.0 * w[0] - w[1], &[0.7, 2.0], None).unwrap();
        assert!(t.abs() < 1e-6);
        assert!(fd_hessian_trace(|_| 0.0, &vec![0.0; 501], None).is_err());
    }

    #[test]
    fn brute_n_step_examples() {
        let grad = |w: &[f64]| vec![2.0 * w[0]];
        let one = brute_n_step(grad, &[1.0], &StepRate::Scalar(0.1), 1).unwrap();
        assert!((one[0] - 0.8).abs() < 1e-15);
        let still = brute_n_step(grad, &[1.5], &StepRate::Scalar(0.0), 10).unwrap();
        assert_eq!(still, vec![1.5]);
        let eta = 0.3;
        let n = 100_000;
        let flow = brute_n_step(grad, &[1.0], &StepRate::Scalar(eta / n as f64), n).unwrap();
        assert!((flow[0] - (-2.0 * eta).exp()).abs() < 10.0 / n as f64);
        let blow = brute_n_step(grad, &[1.0], &StepRate::Scalar(5.0), 100);
        assert!(matches!(blow, Err(Error::Diverged { .. })));
    }
}
