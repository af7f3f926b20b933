//! Total sharpness `Tr E∇²ℓ` (Hutchinson) and the top Hessian eigenvalue.

use serde::{Deserialize, Serialize};

use crate::datagen::{Batch, BatchSource};
use crate::entropic::EntropicConfig;
use crate::error::{invalid, Result};
use crate::models::{Architecture, Network, ParamVector};
use crate::numerics::{power_iteration, Rng};
use crate::stats::Estimate;

const POWER_TOL: f64 = 1e-7;
const POWER_MAX_ITER: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sharpness {
    /// Hutchinson estimate of `Tr E∇²ℓ`.
    pub trace: Estimate,
    pub lambda_max: f64,
    pub power_converged: bool,
}

/// The batch on which curvature is measured: the exact population batch for
/// deep-linear networks when the source offers one, otherwise `cfg.n_eval`
/// samples drawn from `rng`.
pub fn curvature_batch<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    rng: &Rng,
) -> Result<Batch> {
    if net.arch() == Architecture::DeepLinear {
        if let Some((b, _)) = source.population() {
            return Ok(b);
        }
    }
    source.sample(&mut rng.child(u64::MAX - 1), cfg.n_eval)
}

/// Hutchinson trace over `probes` Rademacher vectors plus `λ_max` of the
/// Hessian operator by power iteration.
pub fn measure_sharpness<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    probes: usize,
    rng: &Rng,
) -> Result<Sharpness> {
    if probes == 0 {
        return Err(invalid("sharpness needs at least one probe"));
    }
    let batch = curvature_batch(net, source, cfg, rng)?;
    sharpness_on(net, &batch, probes, rng)
}

/// [`measure_sharpness`] on a fixed batch.
pub fn sharpness_on(net: &Network, batch: &Batch, probes: usize, rng: &Rng) -> Result<Sharpness> {
    if probes == 0 {
        return Err(invalid("sharpness needs at least one probe"));
    }
    let layout = net.layout();
    let mut probe_rng = rng.child(u64::MAX - 2);
    let quads = (0..probes)
        .map(|_| {
            let v = ParamVector::new(layout.clone(), probe_rng.rademacher_vec(layout.len()))?;
            Ok(v.dot(&net.hvp(batch, &v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let top = power_iteration(
        |v| {
            let p = ParamVector::new(layout.clone(), v.to_vec())?;
            Ok(net.hvp(batch, &p)?.data)
        },
        layout.len(),
        POWER_TOL,
        POWER_MAX_ITER,
    )?;
    Ok(Sharpness {
        trace: Estimate::from_samples(&quads),
        lambda_max: top.lambda,
        power_converged: top.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform::direct_sharpness_two_layer;
    use crate::datagen::DataModel;
    use crate::numerics::Matrix;

    #[test]
    fn scalar_quadratic_trace_is_two() {
        let net = Network::new(Architecture::DeepLinear, vec![Matrix::scalar(0.3)]).unwrap();
        let b = Batch::new(Matrix::scalar(1.0), Matrix::scalar(0.0)).unwrap();
        for probes in [1, 5] {
            let s = sharpness_on(&net, &b, probes, &Rng::new(1)).unwrap();
            assert!((s.trace.value - 2.0).abs() < 1e-6);
            assert!((s.lambda_max - 2.0).abs() < 1e-6);
        }
        assert!(sharpness_on(&net, &b, 0, &Rng::new(1)).is_err());
    }

    #[test]
    fn two_layer_matches_direct_formula() {
        let mut rng = Rng::new(3);
        let net = Network::random(Architecture::DeepLinear, &[3, 4, 2], &mut rng, 1.0).unwrap();
        let sx = Matrix::from_diag(&[1.0, 0.5, 2.0]);
        let dm = DataModel::new(Matrix::zeros(2, 3), sx.clone(), Matrix::identity(2)).unwrap();
        let cfg = EntropicConfig::new(0.01, 0.0, 8);
        let s = measure_sharpness(&net, &dm, &cfg, 64, &Rng::new(4)).unwrap();
        let direct = direct_sharpness_two_layer(net.weight(0), net.weight(1), &sx, 2).unwrap();
        assert!((s.trace.value - direct).abs() < 3.0 * s.trace.std_err + 1e-6, "{s:?} vs {direct}");
    }
}
