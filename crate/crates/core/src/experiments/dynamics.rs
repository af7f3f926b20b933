//! Recipes about the optimisation dynamics themselves: the order of the
//! entropic correction and the entropy response to a learning-rate drop.

use serde::{Deserialize, Serialize};

use super::balance::{finished, plain_config};
use super::{require, Check, Outcome, Row};
use crate::datagen::DataModel;
use crate::entropic::{verify_entropic_equivalence, CorrectionOrder, EntropicConfig};
use crate::error::Result;
use crate::models::{Activation, Architecture, Network};
use crate::numerics::{Matrix, Rng};
use crate::stats::{log_log_slope, mean};
use crate::trainer::{train, LrPhase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropicOrderParams {
    pub etas: Vec<f64>,
    pub n: usize,
    pub weight: f64,
    pub x: f64,
    pub y: f64,
    /// Prefactor of the second-order correction under test.
    pub phi2_coefficient: f64,
    /// A second prefactor evaluated for comparison only.
    pub reference_coefficient: f64,
    pub first_order_slope: f64,
    pub second_order_slope: f64,
    pub first_order_tolerance: f64,
    pub second_order_tolerance: f64,
}

impl Default for EntropicOrderParams {
    fn default() -> Self {
        Self {
            etas: vec![0.2, 0.1, 0.05, 0.025, 0.0125],
            n: 10_000,
            weight: 1.0,
            x: 1.0,
            y: 0.0,
            phi2_coefficient: EntropicConfig::new(0.1, 0.0, 1).phi2_coefficient,
            reference_coefficient: 1.0 / 6.0,
            first_order_slope: 3.0,
            second_order_slope: 4.0,
            first_order_tolerance: 0.3,
            second_order_tolerance: 0.4,
        }
    }
}

impl EntropicOrderParams {
    pub fn validate(&self) -> Result<()> {
        require(self.etas.len() >= 2, "need at least two learning rates")?;
        require(self.etas.iter().all(|&e| e > 0.0), "learning rates must be positive")?;
        require(self.n >= 10, "n must be at least 10")
    }
}

/// `‖θ′_n − θ₁‖` for every `η` of `p`, with correction `order` and prefactor `c`.
fn discrepancies(p: &EntropicOrderParams, order: CorrectionOrder, c: f64) -> Result<Vec<f64>> {
    let net = Network::new(Architecture::DeepLinear, vec![Matrix::scalar(p.weight)])?;
    p.etas
        .iter()
        .map(|&eta| {
            let mut cfg = EntropicConfig::new(eta, 0.0, 1);
            cfg.phi2_coefficient = c;
            verify_entropic_equivalence(&net, &[p.x], &[p.y], &cfg, p.n, order)
        })
        .collect()
}

/// Scalar linear model: one step with `η` on the loss against `n` steps with
/// `η/n` on the corrected loss. The gap shrinks as `η³` with the first-order
/// correction and as `η⁴` with both.
pub fn entropic_order(p: &EntropicOrderParams) -> Result<Outcome> {
    p.validate()?;
    let mut out = Outcome::default();
    let first = discrepancies(p, CorrectionOrder::First, p.phi2_coefficient)?;
    let second = discrepancies(p, CorrectionOrder::Second, p.phi2_coefficient)?;
    let reference = discrepancies(p, CorrectionOrder::Second, p.reference_coefficient)?;
    for (series, vals) in [("first", &first), ("second", &second), ("second_reference", &reference)] {
        for (&eta, &v) in p.etas.iter().zip(vals.iter()) {
            out.rows.push(Row::new(series, eta, "discrepancy", v));
        }
    }
    let s1 = log_log_slope(&p.etas, &first);
    let s2 = log_log_slope(&p.etas, &second);
    let sr = log_log_slope(&p.etas, &reference);
    out.note("first_order_slope", s1);
    out.note("second_order_slope", s2);
    out.note("reference_coefficient", p.reference_coefficient);
    out.note("reference_second_order_slope", sr);
    out.push(Check::within(1, "slope with first-order correction", s1, p.first_order_slope, p.first_order_tolerance));
    out.push(Check::within(
        1,
        format!("slope with second-order correction (c = {})", p.phi2_coefficient),
        s2,
        p.second_order_slope,
        p.second_order_tolerance,
    ));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDropParams {
    pub dims: Vec<usize>,
    pub teacher_scale: f64,
    pub init_scale: f64,
    pub input_scale: f64,
    pub noise: f64,
    pub eta: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Steps before the measured window.
    pub warmup_steps: usize,
    /// Length of each measured window, before and after the drop.
    pub window: usize,
    pub drop_factor: f64,
    pub record_every: usize,
    pub metric_batches: usize,
    pub seed: u64,
}

impl Default for LrDropParams {
    fn default() -> Self {
        Self {
            dims: vec![8, 32, 1],
            teacher_scale: 1.0,
            init_scale: 1.0,
            input_scale: 0.005,
            noise: 0.1,
            eta: 20.0,
            weight_decay: 5e-4,
            batch_size: 32,
            warmup_steps: 20_000,
            window: 500,
            drop_factor: 10.0,
            record_every: 10,
            metric_batches: 64,
            seed: 1,
        }
    }
}

impl LrDropParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dims.len() == 3, "lr drop uses a two-layer network")?;
        require(self.eta > 0.0 && self.drop_factor > 1.0, "eta must be positive and drop_factor above 1")?;
        require(self.weight_decay > 0.0, "the entropy rise needs weight decay")?;
        require(self.window >= self.record_every && self.record_every > 0, "window must cover one record")
    }
}

/// Small ReLU MLP with weight decay: after a long phase at a high learning
/// rate, dividing the rate raises the entropy `S` (measured at the original
/// rate so that only the gradient noise is compared).
pub fn lr_drop(p: &LrDropParams) -> Result<Outcome> {
    p.validate()?;
    let relu = Architecture::Mlp { activation: Activation::Relu };
    let (dx, dy) = (p.dims[0], p.dims[2]);
    let mut rng = Rng::new(p.seed);
    let teacher = Network::random(relu, &p.dims, &mut rng, p.teacher_scale)?;
    let dm = DataModel::new(
        Matrix::zeros(dy, dx),
        Matrix::identity(dx).scale(p.input_scale),
        Matrix::identity(dy).scale(p.noise),
    )?
    .with_teacher(teacher)?;
    let net = Network::random(relu, &p.dims, &mut rng, p.init_scale)?;
    let cfg = EntropicConfig::new(p.eta, p.weight_decay, p.batch_size);
    let warm = finished(train(&net, &dm, &plain_config(cfg.clone(), p.warmup_steps, p.warmup_steps / 10, p.seed))?)?;

    let mut tc = plain_config(cfg, 2 * p.window, p.record_every, p.seed + 1);
    tc.metrics.batches = p.metric_batches;
    tc.lr_schedule = vec![LrPhase {
        from_step: p.window,
        multiplier: 1.0 / p.drop_factor,
    }];
    let run = finished(train(&warm.network, &dm, &tc)?)?;

    let mut out = Outcome::default();
    for r in warm.records.iter() {
        out.rows.push(Row::new("warmup", r.step as f64, "entropy", r.entropy.value));
        out.rows.push(Row::new("warmup", r.step as f64, "loss", r.loss));
    }
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    for r in run.records.iter().filter(|r| r.step > 0) {
        let x = (p.warmup_steps + r.step) as f64;
        out.rows.push(Row::new("window", x, "entropy", r.entropy.value));
        out.rows.push(Row::new("window", x, "loss", r.loss));
        out.rows.push(Row::new("window", x, "lr", r.lr));
        if r.step <= p.window {
            pre.push(r.entropy.value);
        } else {
            post.push(r.entropy.value);
        }
    }
    let (s_pre, s_post) = (mean(&pre), mean(&post));
    out.note("entropy_pre", s_pre);
    out.note("entropy_post", s_post);
    out.note("ratio", s_post / s_pre);
    out.push(Check::above(15, "post-drop over pre-drop mean entropy", s_post / s_pre, 1.0));
    Ok(out)
}
