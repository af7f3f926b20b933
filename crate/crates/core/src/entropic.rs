//! The entropic correction terms, the entropy `S(θ)`, the free energy
//! `F = L + γ‖θ‖² + S`, and a brute-force check that gradient descent on the
//! corrected loss tracks a single large step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Batch, BatchSource};
use crate::error::{invalid, shape, Error, Result};
use crate::models::{Network, ParamVector};
use crate::numerics::{sym_eigen, Matrix, Rng};
use crate::oracle::{brute_n_step, StepRate};
use crate::stats::Estimate;

/// Learning rate: a scalar `η` or a symmetric PSD matrix `Λ` acting on the
/// flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Scalar(f64),
    Matrix(Matrix),
}

impl LearningRate {
    pub fn validate(&self) -> Result<()> {
        match self {
            LearningRate::Scalar(eta) if !eta.is_finite() || *eta < 0.0 => {
                Err(invalid(format!("learning rate {eta} must be finite and non-negative")))
            }
            LearningRate::Scalar(_) => Ok(()),
            LearningRate::Matrix(m) => {
                if !m.is_square() {
                    return Err(shape("matrix learning rate must be square"));
                }
                if !m.is_symmetric(1e-12) {
                    return Err(invalid("matrix learning rate must be symmetric"));
                }
                let lmin = sym_eigen(m)?.values.last().copied().unwrap_or(0.0);
                if lmin < -1e-12 * m.max_abs().max(1.0) {
                    return Err(Error::NotPsd(lmin));
                }
                Ok(())
            }
        }
    }

    /// `Λv`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            LearningRate::Scalar(eta) => v.iter().map(|x| eta * x).collect(),
            LearningRate::Matrix(m) => m.mat_vec(v),
        }
    }

    /// `vᵀΛv`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        match self {
            LearningRate::Scalar(eta) => eta * v.iter().map(|x| x * x).sum::<f64>(),
            LearningRate::Matrix(m) => self::dot(v, &m.mat_vec(v)),
        }
    }

    pub fn scale(&self, s: f64) -> LearningRate {
        match self {
            LearningRate::Scalar(eta) => LearningRate::Scalar(eta * s),
            LearningRate::Matrix(m) => LearningRate::Matrix(m.scale(s)),
        }
    }

    /// The scalar `η`, or an error for matrix rates.
    pub fn scalar(&self) -> Result<f64> {
        match self {
            LearningRate::Scalar(eta) => Ok(*eta),
            LearningRate::Matrix(_) => Err(invalid("this quantity is defined for a scalar learning rate only")),
        }
    }

    /// Largest eigenvalue of `Λ` (or `η`).
    pub fn spectral_norm(&self) -> f64 {
        match self {
            LearningRate::Scalar(eta) => eta.abs(),
            LearningRate::Matrix(m) => sym_eigen(m)
                .map(|e| e.values.iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .unwrap_or(f64::NAN),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            LearningRate::Scalar(eta) => *eta == 0.0,
            LearningRate::Matrix(m) => m.max_abs() == 0.0,
        }
    }

    fn step_rate(&self, n: usize) -> StepRate {
        match self {
            LearningRate::Scalar(eta) => StepRate::Scalar(eta / n as f64),
            LearningRate::Matrix(m) => StepRate::Dense {
                dim: m.rows(),
                data: m.scale(1.0 / n as f64).into_vec(),
            },
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How weight decay enters the update and the free energy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayConvention {
    /// Free-energy term `γ‖θ‖²`, force `2γθ`, balance coefficient `4γ`.
    #[default]
    Coupled,
    /// Force `γθ` as in the flow display; free-energy term `½γ‖θ‖²`,
    /// balance coefficient `2γ`.
    FlowDisplay,
}

fn default_batches() -> usize {
    100
}

fn default_eval() -> usize {
    4096
}

fn default_phi2() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropicConfig {
    pub lr: LearningRate,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Batches `K` used for every `E_B` estimate.
    #[serde(default = "default_batches")]
    pub n_batches: usize,
    /// Samples used to estimate the population loss.
    #[serde(default = "default_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub decay: DecayConvention,
    /// Prefactor of the second-order term `c · gᵀΛ∇²ℓΛg`; `½` by default.
    #[serde(default = "default_phi2")]
    pub phi2_coefficient: f64,
}

impl EntropicConfig {
    pub fn new(eta: f64, weight_decay: f64, batch_size: usize) -> Self {
        Self {
            lr: LearningRate::Scalar(eta),
            weight_decay,
            batch_size,
            n_batches: default_batches(),
            n_eval: default_eval(),
            decay: DecayConvention::Coupled,
            phi2_coefficient: default_phi2(),
        }
    }

    pub fn with_batches(mut self, k: usize) -> Self {
        self.n_batches = k;
        self
    }

    pub fn with_eval(mut self, n: usize) -> Self {
        self.n_eval = n;
        self
    }

    pub fn with_lr(mut self, lr: LearningRate) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(invalid("weight decay must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.n_batches == 0 || self.n_eval == 0 {
            return Err(invalid("batch size, batch count and eval size must be positive"));
        }
        Ok(())
    }

    pub fn eta(&self) -> Result<f64> {
        self.lr.scalar()
    }

    /// Coefficient `c` of the decay force `c·θ`.
    pub fn decay_force(&self) -> f64 {
        match self.decay {
            DecayConvention::Coupled => 2.0 * self.weight_decay,
            DecayConvention::FlowDisplay => self.weight_decay,
        }
    }

    /// Weight-decay term of the free energy.
    pub fn decay_energy(&self, norm_sq: f64) -> f64 {
        0.5 * self.decay_force() * norm_sq
    }

    /// Coefficient in front of the weight side of every balance law.
    pub fn balance_coefficient(&self) -> f64 {
        2.0 * self.decay_force()
    }
}

fn single(x: &[f64], y: &[f64]) -> Result<Batch> {
    Batch::new(Matrix::row_vector(x), Matrix::row_vector(y))
}

/// `¼ ∇ℓᵀ Λ ∇ℓ` for one example.
pub fn phi1(net: &Network, x: &[f64], y: &[f64], cfg: &EntropicConfig) -> Result<f64> {
    let g = net.batch_gradient(&single(x, y)?)?.flatten();
    check_lr_dim(&cfg.lr, g.len())?;
    Ok(0.25 * cfg.lr.quad(&g.data))
}

/// `c · ∇ℓᵀ Λ ∇²ℓ Λ ∇ℓ` for one example, `c = cfg.phi2_coefficient`.
pub fn phi2(net: &Network, x: &[f64], y: &[f64], cfg: &EntropicConfig) -> Result<f64> {
    let b = single(x, y)?;
    let g = net.batch_gradient(&b)?.flatten();
    check_lr_dim(&cfg.lr, g.len())?;
    let lg = ParamVector::new(g.layout.clone(), cfg.lr.apply(&g.data))?;
    if lg.norm() == 0.0 {
        return Ok(0.0);
    }
    let hlg = net.hvp(&b, &lg)?;
    Ok(cfg.phi2_coefficient * lg.dot(&hlg))
}

fn check_lr_dim(lr: &LearningRate, n: usize) -> Result<()> {
    match lr {
        LearningRate::Matrix(m) if m.rows() != n => Err(shape(format!(
            "learning-rate matrix is {}x{}, model has {n} parameters",
            m.rows(),
            m.cols()
        ))),
        _ => Ok(()),
    }
}

/// Flattened mean gradients of `k` batches, batch `i` drawn from
/// `rng.child(i)` so that repeated calls with the same `rng` see the same data.
pub fn batch_gradient_samples<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    batch_size: usize,
    k: usize,
    rng: &Rng,
) -> Result<Vec<ParamVector>> {
    (0..k)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.child(i as u64);
            let b = source.sample(&mut r, batch_size)?;
            Ok(net.batch_gradient(&b)?.flatten())
        })
        .collect()
}

/// `S(θ) = ¼ E_B ‖√Λ ḡ_B‖²` from `K` sampled batches, with standard error.
pub fn entropy<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    rng: &Rng,
) -> Result<Estimate> {
    cfg.validate()?;
    check_lr_dim(&cfg.lr, net.layout().len())?;
    let grads = batch_gradient_samples(net, source, cfg.batch_size, cfg.n_batches, rng)?;
    let vals: Vec<f64> = grads.iter().map(|g| 0.25 * cfg.lr.quad(&g.data)).collect();
    Ok(Estimate::from_samples(&vals))
}

/// Components of a free-energy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy {
    pub loss: Estimate,
    pub decay: f64,
    pub entropy: Estimate,
}

impl FreeEnergy {
    pub fn total(&self) -> f64 {
        self.loss.value + self.decay + self.entropy.value
    }

    /// Standard error of the total, treating the two estimates as independent.
    pub fn std_err(&self) -> f64 {
        self.loss.std_err.hypot(self.entropy.std_err)
    }
}

/// Stream index reserved for the loss-estimation batch.
const EVAL_STREAM: u64 = u64::MAX;

/// Population-loss estimate over `cfg.n_eval` fresh samples from
/// `rng.child(EVAL_STREAM)`.
pub fn risk<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    rng: &Rng,
) -> Result<Estimate> {
    let b = source.sample(&mut rng.child(EVAL_STREAM), cfg.n_eval)?;
    Ok(Estimate::from_samples(&net.losses(&b)?))
}

/// `F(θ) = L(θ) + γ‖θ‖² + S(θ)` with every expectation sampled from streams
/// derived from `rng`; the same `rng` gives common random numbers across θ.
pub fn free_energy<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    rng: &Rng,
) -> Result<FreeEnergy> {
    Ok(FreeEnergy {
        loss: risk(net, source, cfg, rng)?,
        decay: cfg.decay_energy(net.norm_sq()),
        entropy: entropy(net, source, cfg, rng)?,
    })
}

/// Which correction terms the verifier adds to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionOrder {
    First,
    Second,
}

/// `‖θ′_n − θ₁‖`, where `θ₁` is one step on `ℓ` with `Λ` and `θ′_n` is `n`
/// steps with `Λ/n` on `ℓ + φ₁` (or `ℓ + φ₁ + φ₂`). The correction gradients
/// are central differences of the corrections themselves.
pub fn verify_entropic_equivalence(
    net: &Network,
    x: &[f64],
    y: &[f64],
    cfg: &EntropicConfig,
    n: usize,
    order: CorrectionOrder,
) -> Result<f64> {
    if n < 10 {
        return Err(invalid("the equivalence check needs n >= 10"));
    }
    cfg.lr.validate()?;
    let b = single(x, y)?;
    let theta0 = net.params();
    check_lr_dim(&cfg.lr, theta0.len())?;
    if cfg.lr.is_zero() {
        return Ok(0.0);
    }
    let g0 = net.batch_gradient(&b)?.flatten();
    let step = cfg.lr.apply(&g0.data);
    let theta1: Vec<f64> = theta0.data.iter().zip(&step).map(|(t, s)| t - s).collect();

    let layout = theta0.layout.clone();
    let at = |theta: &[f64]| -> Result<Network> {
        net.with_params(&ParamVector::new(layout.clone(), theta.to_vec())?)
    };
    let correction = |theta: &[f64]| -> Result<f64> {
        let m = at(theta)?;
        let mut c = phi1(&m, x, y, cfg)?;
        if order == CorrectionOrder::Second {
            c += phi2(&m, x, y, cfg)?;
        }
        Ok(c)
    };
    let mut failure: Option<Error> = None;
    let grad = |theta: &[f64]| -> Vec<f64> {
        let attempt = || -> Result<Vec<f64>> {
            let mut g = at(theta)?.batch_gradient(&b)?.flatten().data;
            let h = 1e-6 * (1.0 + theta.iter().map(|v| v * v).sum::<f64>().sqrt());
            let mut t = theta.to_vec();
            for i in 0..t.len() {
                t[i] = theta[i] + h;
                let up = correction(&t)?;
                t[i] = theta[i] - h;
                let down = correction(&t)?;
                t[i] = theta[i];
                g[i] += (up - down) / (2.0 * h);
            }
            Ok(g)
        };
        attempt().unwrap_or_else(|e| {
            failure.get_or_insert(e);
            vec![f64::NAN; theta.len()]
        })
    };
    let result = brute_n_step(grad, &theta0.data, &cfg.lr.step_rate(n), n);
    if let Some(e) = failure {
        return Err(e);
    }
    let theta_n = result?;
    Ok(theta_n
        .iter()
        .zip(&theta1)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Estimated gradient of `F` with common random numbers:
/// `∇L̂ + cθ + ∇Ŝ`, where `∇Ŝ` is a central difference of the entropy estimator.
pub fn free_energy_gradient<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    rng: &Rng,
) -> Result<ParamVector> {
    cfg.validate()?;
    let eval = source.sample(&mut rng.child(EVAL_STREAM), cfg.n_eval)?;
    let theta = net.params();
    let mut force = net.batch_gradient(&eval)?.flatten();
    force = force.add_scaled(cfg.decay_force(), &theta);
    let h = 1e-5 * (1.0 + theta.norm());
    let mut t = theta.clone();
    for i in 0..theta.len() {
        t.data[i] = theta.data[i] + h;
        let up = entropy(&net.with_params(&t)?, source, cfg, rng)?.value;
        t.data[i] = theta.data[i] - h;
        let down = entropy(&net.with_params(&t)?, source, cfg, rng)?.value;
        t.data[i] = theta.data[i];
        force.data[i] += (up - down) / (2.0 * h);
    }
    Ok(force)
}

/// One explicit Euler step `θ ← θ − dt·∇F̂(θ)` of the entropic flow.
pub fn entropic_flow_step<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    rng: &Rng,
    dt: f64,
) -> Result<Network> {
    let eta = cfg.lr.spectral_norm();
    if !(dt > 0.0) || dt > eta / 10.0 {
        return Err(invalid(format!("flow step dt={dt} must lie in (0, η/10] with η={eta}")));
    }
    let force = free_energy_gradient(net, source, cfg, rng)?;
    let next = net.params().add_scaled(-dt, &force);
    let norm = next.norm();
    if !next.is_finite() || norm > 1e8 {
        return Err(Error::Diverged { step: 1, norm });
    }
    net.with_params(&next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FixedDataset;
    use crate::models::Architecture;

    fn scalar_net(w: f64) -> Network {
        Network::new(Architecture::DeepLinear, vec![Matrix::scalar(w)]).unwrap()
    }

    fn point_data() -> FixedDataset {
        FixedDataset::new(Batch::new(Matrix::scalar(1.0), Matrix::scalar(0.0)).unwrap()).unwrap()
    }

    #[test]
    fn phi_examples() {
        let net = scalar_net(1.0);
        let cfg = EntropicConfig::new(0.1, 0.0, 1);
        assert!((phi1(&net, &[1.0], &[0.0], &cfg).unwrap() - 0.1).abs() < 1e-15);
        assert!((phi2(&net, &[1.0], &[0.0], &cfg).unwrap() - 0.04).abs() < 1e-9);
        assert_eq!(phi1(&net, &[1.0], &[1.0], &cfg).unwrap(), 0.0);
        assert_eq!(phi2(&net, &[1.0], &[1.0], &cfg).unwrap(), 0.0);
        let zero = EntropicConfig::new(0.0, 0.0, 1);
        assert_eq!(phi2(&net, &[1.0], &[0.0], &zero).unwrap(), 0.0);
    }

    #[test]
    fn phi1_with_matrix_rate() {
        // ℓ = (w₁·1 + w₂·1 − y)² with y chosen so the gradient is (2, 2); Λ ignores w₂.
        let net = Network::new(Architecture::DeepLinear, vec![Matrix::row_vector(&[1.0, 0.0])]).unwrap();
        let cfg = EntropicConfig::new(0.0, 0.0, 1)
            .with_lr(LearningRate::Matrix(Matrix::from_diag(&[0.1, 0.0])));
        let v = phi1(&net, &[1.0, 2.5], &[0.0], &cfg).unwrap();
        // g = 2·(1 − 0)·(1, 2.5) = (2, 5).
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn entropy_and_free_energy_examples() {
        let data = point_data();
        let rng = Rng::new(0);
        let cfg = EntropicConfig::new(0.05, 0.01, 1).with_batches(10).with_eval(8);
        let s = entropy(&scalar_net(1.0), &data, &cfg, &rng).unwrap();
        assert!((s.value - 0.05).abs() < 1e-15);
        let doubled = entropy(&scalar_net(1.0), &data, &cfg.clone().with_lr(LearningRate::Scalar(0.1)), &rng).unwrap();
        assert_eq!(doubled.value, 2.0 * s.value);
        let f = free_energy(&scalar_net(1.0), &data, &cfg, &rng).unwrap();
        assert!((f.total() - 1.06).abs() < 1e-12);
        let plain = EntropicConfig::new(0.0, 0.0, 1).with_eval(8);
        let f0 = free_energy(&scalar_net(1.0), &data, &plain, &rng).unwrap();
        assert_eq!(f0.total(), f0.loss.value);
        let origin = free_energy(&scalar_net(0.0), &data, &cfg, &rng).unwrap();
        assert_eq!(origin.decay, 0.0);
    }

    #[test]
    fn equivalence_trivial_cases() {
        let net = scalar_net(1.0);
        let zero = EntropicConfig::new(0.0, 0.0, 1);
        assert_eq!(verify_entropic_equivalence(&net, &[1.0], &[0.0], &zero, 10, CorrectionOrder::First).unwrap(), 0.0);
        assert!(verify_entropic_equivalence(&net, &[1.0], &[0.0], &zero, 5, CorrectionOrder::First).is_err());
    }

    #[test]
    fn flow_step_matches_hand_gradient() {
        // Single point (1, 0): L = w², S = ¼η(2w)² = ηw², decay γw² with force 2γw.
        let data = point_data();
        let (eta, gamma, w) = (0.1, 0.01, 0.7);
        let cfg = EntropicConfig::new(eta, gamma, 1).with_batches(4).with_eval(4);
        let dt = 0.01;
        let next = entropic_flow_step(&scalar_net(w), &data, &cfg, &Rng::new(1), dt).unwrap();
        let expect = w - dt * (2.0 * w + 2.0 * gamma * w + 2.0 * eta * w);
        assert!((next.weight(0)[(0, 0)] - expect).abs() < 1e-6);
        assert!(entropic_flow_step(&scalar_net(w), &data, &cfg, &Rng::new(1), 0.5).is_err());
    }
}
