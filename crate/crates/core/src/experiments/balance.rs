//! Gradient-balance recipes: layer, neuron, weight-decay limit, `WU`
//! products and polynomial neurons.

use serde::{Deserialize, Serialize};

use super::{require, tail_mean, Check, Outcome, Row};
use crate::datagen::{BatchSource, DataModel};
use crate::entropic::{batch_gradient_samples, EntropicConfig};
use crate::error::{Error, Result};
use crate::models::{Activation, Architecture, Network, ParamVector};
use crate::numerics::{child_seed, random_orthonormal, Matrix, Rng};
use crate::stats::spearman;
use crate::symmetry::{product_form_residual, wu_alignment_residual, GradientCovariance};
use crate::trainer::{product_gradient_samples, train, MetricRecord, TrainConfig, TrainRun};

/// Stream for gradient samples taken along a stationary tail.
const TAIL_PROBE_STREAM: u64 = 77;

/// A training config that records only loss, entropy and gradient traces.
pub(crate) fn plain_config(cfg: EntropicConfig, steps: usize, record_every: usize, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig::new(cfg, steps, record_every.max(1), seed);
    tc.metrics.sharpness_every = 0;
    tc.metrics.final_sharpness = false;
    tc.metrics.balance = false;
    tc
}

pub(crate) fn finished(run: TrainRun) -> Result<TrainRun> {
    match run.diverged {
        Some(d) => Err(Error::Diverged { step: d.step, norm: d.norm }),
        None => Ok(run),
    }
}

/// Continues SGD from `net` for `steps` steps in `chunks` equal segments.
/// After each segment `visit` receives the segment index, the network and
/// `k` fresh batch gradients, so that second moments can be pooled over a
/// stationary stretch of the trajectory.
pub(crate) fn stationary_tail<S, F>(
    net: &Network,
    source: &S,
    cfg: &EntropicConfig,
    steps: usize,
    chunks: usize,
    k: usize,
    seed: u64,
    mut visit: F,
) -> Result<Network>
where
    S: BatchSource + ?Sized,
    F: FnMut(usize, &Network, Vec<ParamVector>) -> Result<()>,
{
    let chunk = (steps / chunks.max(1)).max(1);
    let probe = Rng::new(seed).child(TAIL_PROBE_STREAM);
    let mut net = net.clone();
    for c in 0..chunks {
        let mut tc = plain_config(cfg.clone(), chunk, chunk, child_seed(seed, 1000 + c as u64));
        tc.metrics.batches = 1;
        net = finished(train(&net, source, &tc)?)?.network;
        let samples = batch_gradient_samples(&net, source, cfg.batch_size, k, &probe.child(c as u64))?;
        visit(c, &net, samples)?;
    }
    Ok(net)
}

fn trajectory_rows(out: &mut Outcome, records: &[MetricRecord]) {
    for r in records {
        let x = r.step as f64;
        out.rows.push(Row::new("trajectory", x, "loss", r.loss));
        out.rows.push(Row::new("trajectory", x, "entropy", r.entropy.value));
        for (i, t) in r.grad_traces.iter().enumerate() {
            out.rows.push(Row::new("trajectory", x, format!("grad_trace_{}", i + 1), *t));
        }
        for (i, t) in r.weight_traces.iter().enumerate() {
            out.rows.push(Row::new("trajectory", x, format!("weight_trace_{}", i + 1), *t));
        }
        for (i, v) in r.layer_residuals.iter().enumerate() {
            out.rows.push(Row::new("trajectory", x, format!("layer_residual_{}", i + 1), *v));
        }
        if let Some(v) = r.mean_layer_residual() {
            out.rows.push(Row::new("trajectory", x, "layer_residual", v));
        }
        if let Some(v) = r.neuron_residual {
            out.rows.push(Row::new("trajectory", x, "neuron_residual", v));
        }
    }
}

/// Rank correlations of `residual` with entropy and with loss along a trajectory.
fn correlations(records: &[MetricRecord], residual: &[f64]) -> (f64, f64) {
    let ent: Vec<f64> = records.iter().map(|r| r.entropy.value).collect();
    let loss: Vec<f64> = records.iter().map(|r| r.loss).collect();
    (spearman(residual, &ent), spearman(residual, &loss))
}

fn positive(x: f64, what: &str) -> Result<()> {
    require(x.is_finite() && x > 0.0, &format!("{what} must be positive"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerBalanceParams {
    pub dims: Vec<usize>,
    pub noise: f64,
    pub init_scale: f64,
    /// The first layer starts multiplied and the last divided by this.
    pub imbalance: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub record_every: usize,
    pub metric_batches: usize,
    pub tail_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for LayerBalanceParams {
    fn default() -> Self {
        Self {
            dims: vec![4, 8, 8, 4],
            noise: 0.03,
            init_scale: 0.7,
            imbalance: 2.0,
            eta: 0.05,
            batch_size: 32,
            steps: 200_000,
            record_every: 500,
            metric_batches: 256,
            tail_fraction: 0.1,
            threshold: 0.15,
            seed: 1,
        }
    }
}

impl LayerBalanceParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dims.len() >= 3, "layer balance needs at least two layers")?;
        require(self.dims[0] == self.dims[self.dims.len() - 1], "teacher map must be square")?;
        positive(self.eta, "eta")?;
        positive(self.noise, "noise")?;
        positive(self.imbalance, "imbalance")?;
        require(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0, "tail_fraction must lie in (0, 1]")?;
        require(self.steps >= self.record_every && self.record_every > 0, "steps must cover one record")
    }
}

/// Deep-linear teacher-student at `γ = 0`: the normalised layer residual
/// settles near zero and tracks the entropy more closely than the loss.
pub fn layer_balance(p: &LayerBalanceParams) -> Result<Outcome> {
    p.validate()?;
    let mut rng = Rng::new(p.seed);
    let d = p.dims[0];
    let dm = DataModel::isotropic(random_orthonormal(&mut rng, d, d)?, p.noise)?;
    let net = Network::random(Architecture::DeepLinear, &p.dims, &mut rng, p.init_scale)?;
    let mut w = net.weights().to_vec();
    let last = w.len() - 1;
    w[0] = w[0].scale(p.imbalance);
    w[last] = w[last].scale(1.0 / p.imbalance);
    let net = net.with_weights(w)?;

    let mut tc = TrainConfig::new(EntropicConfig::new(p.eta, 0.0, p.batch_size), p.steps, p.record_every, p.seed);
    tc.metrics.sharpness_every = 0;
    tc.metrics.final_sharpness = false;
    tc.metrics.batches = p.metric_batches;
    let run = finished(train(&net, &dm, &tc)?)?;

    let mut out = Outcome::default();
    trajectory_rows(&mut out, &run.records);
    let res: Vec<f64> = run.records.iter().filter_map(MetricRecord::mean_layer_residual).collect();
    let tail = tail_mean(&res, p.tail_fraction);
    let (rho_ent, rho_loss) = correlations(&run.records, &res);
    out.note("tail_residual", tail);
    out.note("rho_entropy", rho_ent);
    out.note("rho_loss", rho_loss);
    out.note("initial_residual", res[0]);
    out.push(Check::below(2, "tail layer residual", tail, p.threshold));
    out.push(Check::with(
        2,
        "rank corr with entropy minus with loss",
        rho_ent - rho_loss,
        "> 0".into(),
        rho_ent > rho_loss,
    ));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronBalanceParams {
    pub dims: Vec<usize>,
    pub input_scale: f64,
    pub noise: f64,
    pub teacher_scale: f64,
    pub init_scale: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub record_every: usize,
    pub metric_batches: usize,
    pub tail_fraction: f64,
    /// Required relative drop of the summed residual from its peak.
    pub min_drop: f64,
    pub seed: u64,
}

impl Default for NeuronBalanceParams {
    fn default() -> Self {
        Self {
            dims: vec![32, 32, 8],
            input_scale: 4.0,
            noise: 0.04,
            teacher_scale: 1.0,
            init_scale: 1.0,
            eta: 0.01,
            batch_size: 200,
            steps: 10_000,
            record_every: 100,
            metric_batches: 64,
            tail_fraction: 0.1,
            min_drop: 0.5,
            seed: 1,
        }
    }
}

impl NeuronBalanceParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dims.len() == 3, "neuron balance uses a two-layer network")?;
        positive(self.eta, "eta")?;
        positive(self.input_scale, "input_scale")?;
        positive(self.noise, "noise")?;
        require(self.steps >= self.record_every && self.record_every > 0, "steps must cover one record")
    }
}

/// Two-layer ReLU teacher-student: the summed neuron residual falls well
/// below its peak and tracks the entropy more closely than the loss.
pub fn neuron_balance(p: &NeuronBalanceParams) -> Result<Outcome> {
    p.validate()?;
    let mut rng = Rng::new(p.seed);
    let relu = Architecture::Mlp { activation: Activation::Relu };
    let (dx, dy) = (p.dims[0], p.dims[2]);
    let teacher = Network::random(relu, &p.dims, &mut rng, p.teacher_scale)?;
    let dm = DataModel::new(
        Matrix::zeros(dy, dx),
        Matrix::identity(dx).scale(p.input_scale),
        Matrix::identity(dy).scale(p.noise),
    )?
    .with_teacher(teacher)?;
    let net = Network::random(relu, &p.dims, &mut rng, p.init_scale)?;
    let mut tc = TrainConfig::new(EntropicConfig::new(p.eta, 0.0, p.batch_size), p.steps, p.record_every, p.seed);
    tc.metrics.sharpness_every = 0;
    tc.metrics.final_sharpness = false;
    tc.metrics.batches = p.metric_batches;
    let run = finished(train(&net, &dm, &tc)?)?;

    let mut out = Outcome::default();
    trajectory_rows(&mut out, &run.records);
    let res: Vec<f64> = run.records.iter().filter_map(|r| r.neuron_residual).collect();
    let peak = res.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fin = tail_mean(&res, p.tail_fraction);
    let drop = 1.0 - fin / peak;
    let (rho_ent, rho_loss) = correlations(&run.records, &res);
    out.note("peak_residual", peak);
    out.note("final_residual", fin);
    out.note("rho_entropy", rho_ent);
    out.note("rho_loss", rho_loss);
    out.push(Check::at_least(3, "relative drop from peak", drop, p.min_drop));
    out.push(Check::with(
        3,
        "rank corr with entropy minus with loss",
        rho_ent - rho_loss,
        "> 0".into(),
        rho_ent > rho_loss,
    ));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightBalanceParams {
    pub dim: usize,
    pub noise: f64,
    pub imbalance: f64,
    pub eta: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub records: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for WeightBalanceParams {
    fn default() -> Self {
        Self {
            dim: 2,
            noise: 0.1,
            imbalance: 1.5,
            eta: 1e-4,
            weight_decay: 1e-3,
            batch_size: 4,
            steps: 10_000_000,
            records: 20,
            threshold: 0.05,
            seed: 1,
        }
    }
}

impl WeightBalanceParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dim > 0, "dim must be positive")?;
        positive(self.eta, "eta")?;
        positive(self.weight_decay, "weight_decay")?;
        positive(self.imbalance, "imbalance")?;
        require(self.records > 0 && self.steps >= self.records, "need at least one step per record")
    }
}

fn trace_spread(traces: &[f64]) -> f64 {
    let hi = traces.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = traces.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo) / hi
}

/// Small learning rate with weight decay: the weight traces of the two
/// layers of a linear network equalise.
pub fn weight_balance(p: &WeightBalanceParams) -> Result<Outcome> {
    p.validate()?;
    let d = p.dim;
    let mut rng = Rng::new(p.seed);
    let dm = DataModel::isotropic(random_orthonormal(&mut rng, d, d)?, p.noise)?;
    let net = Network::random(Architecture::DeepLinear, &[d, d, d], &mut rng, 1.0)?;
    let mut w = net.weights().to_vec();
    w[0] = w[0].scale(p.imbalance);
    w[1] = w[1].scale(1.0 / p.imbalance);
    let net = net.with_weights(w)?;
    let mut tc = plain_config(
        EntropicConfig::new(p.eta, p.weight_decay, p.batch_size),
        p.steps,
        p.steps / p.records,
        p.seed,
    );
    tc.metrics.batches = 4;
    let run = finished(train(&net, &dm, &tc)?)?;

    let mut out = Outcome::default();
    trajectory_rows(&mut out, &run.records);
    for r in &run.records {
        out.rows.push(Row::new("trajectory", r.step as f64, "trace_spread", trace_spread(&r.weight_traces)));
    }
    let spread = trace_spread(&run.last().weight_traces);
    out.note("initial_spread", trace_spread(&run.records[0].weight_traces));
    out.note("final_spread", spread);
    out.push(Check::below(4, "final weight-trace spread", spread, p.threshold));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WuAlignmentParams {
    pub dim: usize,
    pub teacher_scale: f64,
    pub init_scale: f64,
    pub noise: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub tail_fraction: f64,
    pub chunks: usize,
    pub samples_per_chunk: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for WuAlignmentParams {
    fn default() -> Self {
        Self {
            dim: 4,
            teacher_scale: 0.7,
            init_scale: 0.5,
            noise: 0.25,
            eta: 0.01,
            batch_size: 16,
            steps: 400_000,
            tail_fraction: 0.1,
            chunks: 100,
            samples_per_chunk: 64,
            threshold: 0.15,
            seed: 4,
        }
    }
}

impl WuAlignmentParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dim > 0, "dim must be positive")?;
        positive(self.eta, "eta")?;
        positive(self.noise, "noise")?;
        require(self.tail_fraction > 0.0 && self.tail_fraction < 1.0, "tail_fraction must lie in (0, 1)")?;
        require(self.chunks > 0 && self.samples_per_chunk > 0, "chunks and samples must be positive")
    }
}

fn tail_split(steps: usize, frac: f64) -> (usize, usize) {
    let tail = ((steps as f64) * frac).round() as usize;
    (steps - tail, tail)
}

/// Bilinear attention toy at `γ = 0`: after burn-in, gradient second moments
/// pooled over the stationary tail satisfy the `WU` alignment law and its
/// product-gradient form.
pub fn wu_alignment(p: &WuAlignmentParams) -> Result<Outcome> {
    p.validate()?;
    let d = p.dim;
    let arch = Architecture::AttentionToy;
    let mut rng = Rng::new(p.seed);
    let teacher = Network::random(arch, &[d], &mut rng, p.teacher_scale)?;
    let dm = DataModel::new(Matrix::zeros(1, d), Matrix::identity(d), Matrix::scalar(p.noise))?.with_teacher(teacher)?;
    let net = Network::random(arch, &[d], &mut rng, p.init_scale)?;
    let cfg = EntropicConfig::new(p.eta, 0.0, p.batch_size);
    let (burn, tail) = tail_split(p.steps, p.tail_fraction);
    let run = finished(train(&net, &dm, &plain_config(cfg.clone(), burn, burn / 20, p.seed))?)?;

    let mut out = Outcome::default();
    trajectory_rows(&mut out, &run.records);
    let mut pooled = Vec::new();
    let mut product = Matrix::zeros(d, d);
    let mut product_scale = 0.0;
    let chunk = tail / p.chunks;
    let probe = Rng::new(p.seed).child(TAIL_PROBE_STREAM + 1);
    let final_net = stationary_tail(&run.network, &dm, &cfg, tail, p.chunks, p.samples_per_chunk, p.seed, |c, net, samples| {
        let w = net.weights();
        let step = (burn + (c + 1) * chunk) as f64;
        let cov = GradientCovariance::from_samples(samples.clone())?;
        let point = wu_alignment_residual(&cov.layer_samples(0), &cov.layer_samples(1), &w[0], &w[1], &cfg)?;
        out.rows.push(Row::new("tail", step, "wu_residual", point.normalized));
        let gm = product_gradient_samples(net, &dm, cfg.batch_size, p.samples_per_chunk, &probe.child(c as u64))?
            .expect("attention toy has a product parameterisation");
        let r = product_form_residual(&w[1], &w[0], &gm)?;
        out.rows.push(Row::new("tail", step, "product_residual", r.normalized));
        product += &r.matrix;
        product_scale += r.scale;
        pooled.extend(samples);
        Ok(())
    })?;
    // γ = 0, so the weights enter only through their shapes.
    let w = final_net.weights();
    let cov = GradientCovariance::from_samples(pooled)?;
    let wu = wu_alignment_residual(&cov.layer_samples(0), &cov.layer_samples(1), &w[0], &w[1], &cfg)?.normalized;
    let e = if product_scale > 0.0 { product.frobenius() / product_scale } else { 0.0 };
    out.note("wu_residual", wu);
    out.note("product_residual", e);
    out.push(Check::below(5, "pooled WU residual", wu, p.threshold));
    out.push(Check::below(5, "pooled product-form residual", e, p.threshold));
    Ok(out)
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolynomialBalanceParams {
    pub dims: Vec<usize>,
    pub degree: u32,
    pub teacher_scale: f64,
    pub init_scale: f64,
    pub noise: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub tail_fraction: f64,
    pub chunks: usize,
    pub samples_per_chunk: usize,
    pub threshold: f64,
    /// Neurons whose larger side is below this fraction of the layer's
    /// largest neuron are treated as dead and skipped.
    pub dead_floor: f64,
    pub seed: u64,
}

impl Default for PolynomialBalanceParams {
    fn default() -> Self {
        Self {
            dims: vec![4, 8, 1],
            degree: 2,
            teacher_scale: 1.0,
            init_scale: 0.5,
            noise: 0.25,
            eta: 0.02,
            batch_size: 8,
            steps: 400_000,
            tail_fraction: 0.1,
            chunks: 100,
            samples_per_chunk: 64,
            threshold: 0.2,
            dead_floor: 1e-6,
            seed: 2,
        }
    }
}

impl PolynomialBalanceParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dims.len() == 3, "polynomial balance uses a two-layer network")?;
        require(self.degree >= 1, "degree must be at least 1")?;
        positive(self.eta, "eta")?;
        positive(self.noise, "noise")?;
        require(self.tail_fraction > 0.0 && self.tail_fraction < 1.0, "tail_fraction must lie in (0, 1)")?;
        require(self.chunks > 0 && self.samples_per_chunk > 0, "chunks and samples must be positive")
    }
}

/// Two-layer polynomial network at `γ = 0`: per hidden unit,
/// `E‖g_in‖² = degree · E‖g_out‖²` over the stationary tail.
pub fn polynomial_balance(p: &PolynomialBalanceParams) -> Result<Outcome> {
    p.validate()?;
    let arch = Architecture::Mlp { activation: Activation::Poly { degree: p.degree } };
    let (dx, h, dy) = (p.dims[0], p.dims[1], p.dims[2]);
    let mut rng = Rng::new(p.seed);
    let teacher = Network::random(arch, &p.dims, &mut rng, p.teacher_scale)?;
    let dm = DataModel::new(Matrix::zeros(dy, dx), Matrix::identity(dx), Matrix::identity(dy).scale(p.noise))?
        .with_teacher(teacher)?;
    let net = Network::random(arch, &p.dims, &mut rng, p.init_scale)?;
    let cfg = EntropicConfig::new(p.eta, 0.0, p.batch_size);
    let (burn, tail) = tail_split(p.steps, p.tail_fraction);
    let mut tc = plain_config(cfg.clone(), burn, burn / 20, p.seed);
    tc.metrics.balance = true;
    let run = finished(train(&net, &dm, &tc)?)?;

    let mut out = Outcome::default();
    trajectory_rows(&mut out, &run.records);
    let mut pooled = Vec::new();
    stationary_tail(&run.network, &dm, &cfg, tail, p.chunks, p.samples_per_chunk, p.seed, |_, _, s| {
        pooled.extend(s);
        Ok(())
    })?;
    let cov = GradientCovariance::from_samples(pooled)?;
    let deg = p.degree as f64;
    let sides: Vec<(f64, f64)> = (0..h).map(|j| (cov.neuron_in(0, j), deg * cov.neuron_out(0, j))).collect();
    let largest = sides.iter().map(|(a, b)| a.max(*b)).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut dead = 0;
    for (j, &(gin, gout)) in sides.iter().enumerate() {
        let m = gin.max(gout);
        let x = (j + 1) as f64;
        out.rows.push(Row::new("neuron", x, "grad_in", gin));
        out.rows.push(Row::new("neuron", x, "degree_times_grad_out", gout));
        if m <= p.dead_floor * largest {
            dead += 1;
            continue;
        }
        let r = (gin - gout).abs() / m;
        out.rows.push(Row::new("neuron", x, "relative_residual", r));
        worst = worst.max(r);
    }
    out.note("worst_relative_residual", worst);
    out.note("dead_neurons", dead as f64);
    out.push(Check::below(6, "worst per-neuron residual", worst, p.threshold));
    Ok(out)
}
