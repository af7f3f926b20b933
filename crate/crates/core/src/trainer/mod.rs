//! SGD training with scalar or matrix learning rates, weight decay,
//! piecewise-constant schedules and recorded trajectories.

mod sharpness;
mod sweep;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use sharpness::{curvature_batch, measure_sharpness, sharpness_on, Sharpness};
pub use sweep::{run_sweep, CellResult, SweepAxis, SweepCell, SweepGrid};

use crate::alignment::{gram_alignment, DEFAULT_EVAL_SAMPLES};
use crate::datagen::{Batch, BatchSource};
use crate::entropic::{batch_gradient_samples, risk, EntropicConfig, LearningRate};
use crate::error::{invalid, Error, Result};
use crate::models::{Activation, Architecture, Network};
use crate::numerics::{Matrix, Rng};
use crate::stats::{mean, Estimate};
use crate::symmetry::{
    product_form_residual, layer_balance_residual, polynomial_balance_residual, wu_alignment_residual,
    GradientCovariance,
};

/// Parameter norm beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// From `from_step` on, the learning rate is the base rate times `multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub from_step: usize,
    pub multiplier: f64,
}

fn default_metric_batches() -> usize {
    64
}
fn default_sharpness_every() -> usize {
    100
}
fn default_probes() -> usize {
    16
}
fn default_final_probes() -> usize {
    64
}
fn yes() -> bool {
    true
}

/// What is measured at each record and how often curvature is probed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Batches used for gradient second moments and entropy.
    #[serde(default = "default_metric_batches")]
    pub batches: usize,
    /// Curvature is measured at records whose step is a multiple of this;
    /// 0 disables it except at the final record.
    #[serde(default = "default_sharpness_every")]
    pub sharpness_every: usize,
    #[serde(default = "default_probes")]
    pub sharpness_probes: usize,
    #[serde(default = "default_final_probes")]
    pub final_probes: usize,
    #[serde(default = "yes")]
    pub final_sharpness: bool,
    #[serde(default = "yes")]
    pub balance: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            batches: default_metric_batches(),
            sharpness_every: default_sharpness_every(),
            sharpness_probes: default_probes(),
            final_probes: default_final_probes(),
            final_sharpness: true,
            balance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub entropic: EntropicConfig,
    pub steps: usize,
    #[serde(default)]
    pub lr_schedule: Vec<LrPhase>,
    pub record_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Apply decay as `θ ← (1 − η̄·c)θ` outside the preconditioner.
    #[serde(default)]
    pub decoupled_decay: bool,
    /// Save a checkpoint every this many steps (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(entropic: EntropicConfig, steps: usize, record_every: usize, seed: u64) -> Self {
        Self {
            entropic,
            steps,
            lr_schedule: Vec::new(),
            record_every,
            seed,
            metrics: MetricsConfig::default(),
            decoupled_decay: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.entropic.validate()?;
        if self.record_every == 0 {
            return Err(invalid("record_every must be positive"));
        }
        if self.lr_schedule.iter().any(|p| !(p.multiplier.is_finite() && p.multiplier > 0.0)) {
            return Err(invalid("learning-rate multipliers must be positive"));
        }
        if self.metrics.batches == 0 || self.metrics.sharpness_probes == 0 || self.metrics.final_probes == 0 {
            return Err(invalid("metric batch and probe counts must be positive"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(invalid("checkpoint_every needs checkpoint_dir"));
        }
        Ok(())
    }

    /// Learning-rate multiplier in force at `step`.
    pub fn multiplier(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|p| p.from_step <= step)
            .max_by_key(|p| p.from_step)
            .map_or(1.0, |p| p.multiplier)
    }

    /// The entropic configuration with the scheduled learning rate at `step`.
    pub fn at_step(&self, step: usize) -> EntropicConfig {
        let m = self.multiplier(step);
        let mut cfg = self.entropic.clone();
        if m != 1.0 {
            cfg.lr = cfg.lr.scale(m);
        }
        cfg
    }
}

/// Mean diagonal of the learning rate, used by decoupled decay.
fn mean_rate(lr: &LearningRate) -> f64 {
    match lr {
        LearningRate::Scalar(eta) => *eta,
        LearningRate::Matrix(m) => m.trace() / m.rows() as f64,
    }
}

/// One SGD step `θ ← θ − Λ(ḡ + cθ)` where `cθ` is the decay force of the
/// configured convention (`2γθ` by default). With `decoupled` the decay is
/// applied as `θ ← θ − Λḡ − η̄cθ` instead.
pub fn sgd_step(net: &Network, batch: &Batch, cfg: &EntropicConfig, decoupled: bool) -> Result<Network> {
    let theta = net.params();
    let g = net.batch_gradient(batch)?.flatten();
    let c = cfg.decay_force();
    let next = if decoupled {
        let step = cfg.lr.apply(&g.data);
        let shrink = 1.0 - mean_rate(&cfg.lr) * c;
        theta.data.iter().zip(&step).map(|(t, s)| shrink * t - s).collect::<Vec<_>>()
    } else {
        let force: Vec<f64> = g.data.iter().zip(&theta.data).map(|(g, t)| g + c * t).collect();
        let step = cfg.lr.apply(&force);
        theta.data.iter().zip(&step).map(|(t, s)| t - s).collect()
    };
    let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Diverged { step: 1, norm });
    }
    net.with_params(&crate::models::ParamVector::new(theta.layout, next)?)
}

/// Measurements taken at one recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Entropy evaluated with the base (unscheduled) learning rate.
    pub entropy: Estimate,
    /// `E Tr[ḡ_iḡ_iᵀ]` per layer.
    pub grad_traces: Vec<f64>,
    /// `Tr[W_iW_iᵀ]` per layer.
    pub weight_traces: Vec<f64>,
    /// Normalised layer-balance residual for each adjacent pair `(i, i+1)`.
    pub layer_residuals: Vec<f64>,
    /// Sum over hidden neurons of the normalised neuron-balance residual.
    pub neuron_residual: Option<f64>,
    pub wu_residual: Option<f64>,
    pub product_residual: Option<f64>,
    pub alignment: Option<f64>,
    pub sharpness: Option<Sharpness>,
}

impl MetricRecord {
    /// Mean normalised layer residual over adjacent pairs.
    pub fn mean_layer_residual(&self) -> Option<f64> {
        (!self.layer_residuals.is_empty()).then(|| mean(&self.layer_residuals))
    }

    pub fn eta_lambda_max(&self) -> Option<f64> {
        self.sharpness.map(|s| self.lr * s.lambda_max)
    }
}

/// Where a run stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub network: Network,
    pub records: Vec<MetricRecord>,
    pub diverged: Option<Divergence>,
    pub steps_completed: usize,
}

impl TrainRun {
    pub fn last(&self) -> &MetricRecord {
        self.records.last().expect("a run always records its initial point")
    }
}

/// Activation degree for the neuron-rescaling symmetry, when there is one.
fn neuron_degree(arch: Architecture) -> Option<u32> {
    match arch {
        Architecture::DeepLinear => Some(1),
        Architecture::Mlp { activation: Activation::Relu } => Some(1),
        Architecture::Mlp { activation: Activation::Poly { degree } } => Some(degree),
        _ => None,
    }
}

fn has_layer_symmetry(arch: Architecture) -> bool {
    matches!(
        arch,
        Architecture::DeepLinear | Architecture::Mlp { activation: Activation::Relu }
    )
}

/// Gradients with respect to the product `M` in `f(WU)`-type models: the
/// attention toy (`M = UV`) and two-layer linear networks (`M = W₂W₁`).
pub(crate) fn product_gradient_samples<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    batch_size: usize,
    k: usize,
    rng: &Rng,
) -> Result<Option<Vec<Matrix>>> {
    let (proxy, layer) = match net.arch() {
        Architecture::AttentionToy => {
            let w = net.weights();
            let d = w[0].rows();
            (vec![w[0].dot(&w[1]), Matrix::identity(d), w[2].clone()], 0)
        }
        Architecture::DeepLinear if net.depth() == 2 => {
            let w = net.weights();
            let d = w[0].cols();
            (vec![Matrix::identity(d), w[1].dot(&w[0])], 1)
        }
        _ => return Ok(None),
    };
    let proxy = Network::new(net.arch(), proxy)?.with_embeddings(
        net.m1().cloned(),
        net.m2().cloned(),
        net.m3().cloned(),
    )?;
    let samples = batch_gradient_samples(&proxy, source, batch_size, k, rng)?;
    Ok(Some(samples.iter().map(|s| s.to_matrices().swap_remove(layer)).collect()))
}

/// Expected loss: exact from the population batch for deep-linear networks,
/// otherwise sampled.
fn expected_loss<S: BatchSource + ?Sized>(net: &Network, source: &S, cfg: &EntropicConfig, rng: &Rng) -> Result<f64> {
    if net.arch() == Architecture::DeepLinear {
        if let Some((b, c)) = source.population() {
            return Ok(net.loss(&b)? + c);
        }
    }
    Ok(risk(net, source, cfg, rng)?.value)
}

/// Mean Gram-cosine over all pairs of hidden layers of two networks.
pub fn mean_hidden_alignment(a: &Network, b: &Network, x: &Matrix) -> Result<f64> {
    let reprs = |n: &Network| -> Result<Vec<Matrix>> {
        (1..n.depth()).map(|l| n.representation(x, l)).collect()
    };
    let (ra, rb) = (reprs(a)?, reprs(b)?);
    if ra.is_empty() || rb.is_empty() {
        return Err(invalid("alignment needs hidden layers in both networks"));
    }
    let mut vals = Vec::new();
    for ha in &ra {
        for hb in &rb {
            vals.push(gram_alignment(ha, hb)?);
        }
    }
    Ok(mean(&vals))
}

struct Recorder<'a, S: ?Sized> {
    source: &'a S,
    tc: &'a TrainConfig,
    rng: Rng,
    partner: Option<(&'a Network, Matrix)>,
}

impl<S: BatchSource + ?Sized> Recorder<'_, S> {
    fn record(&self, net: &Network, step: usize, final_point: bool) -> Result<MetricRecord> {
        let cfg = self.tc.at_step(step);
        let base = &self.tc.entropic;
        let m = &self.tc.metrics;
        let loss = expected_loss(net, self.source, &cfg, &self.rng)?;
        let cov = GradientCovariance::estimate(net, self.source, cfg.batch_size, m.batches, &self.rng)?;
        let ent: Vec<f64> = cov.per_sample(|g| 0.25 * base.lr.quad(g));
        let weights = net.weights();
        let arch = net.arch();
        let scalar_lr = cfg.eta().is_ok();

        let mut layer_residuals = Vec::new();
        let mut neuron_residual = None;
        let mut wu_residual = None;
        let mut product_residual = None;
        if m.balance && scalar_lr {
            if has_layer_symmetry(arch) {
                for i in 0..weights.len().saturating_sub(1) {
                    layer_residuals.push(layer_balance_residual(&cov, weights, i, i + 1, &cfg)?.normalized());
                }
            }
            if let Some(d) = neuron_degree(arch) {
                let mut total = 0.0;
                for i in 0..weights.len().saturating_sub(1) {
                    for j in 0..weights[i].rows() {
                        total += polynomial_balance_residual(&cov, weights, i, j, d, &cfg)?.normalized();
                    }
                }
                if weights.len() > 1 {
                    neuron_residual = Some(total);
                }
            }
            let wu_pair = match arch {
                Architecture::AttentionToy => Some((0, 1)),
                Architecture::DeepLinear if weights.len() == 2 => Some((1, 0)),
                _ => None,
            };
            if let Some((wi, ui)) = wu_pair {
                let gw = cov.layer_samples(wi);
                let gu = cov.layer_samples(ui);
                wu_residual = Some(wu_alignment_residual(&gw, &gu, &weights[wi], &weights[ui], &cfg)?.normalized);
                if let Some(gm) = product_gradient_samples(net, self.source, cfg.batch_size, m.batches, &self.rng)? {
                    product_residual = Some(product_form_residual(&weights[ui], &weights[wi], &gm)?.normalized);
                }
            }
        }

        let alignment = match &self.partner {
            Some((p, x)) => Some(mean_hidden_alignment(net, p, x)?),
            None => None,
        };

        let probes = if final_point && m.final_sharpness {
            Some(m.final_probes)
        } else if m.sharpness_every > 0 && step % m.sharpness_every == 0 {
            Some(m.sharpness_probes)
        } else {
            None
        };
        let sharpness = match probes {
            Some(p) => Some(measure_sharpness(net, self.source, &cfg, p, &self.rng)?),
            None => None,
        };

        Ok(MetricRecord {
            step,
            lr: mean_rate(&cfg.lr),
            loss,
            entropy: Estimate::from_samples(&ent),
            grad_traces: cov.layer_traces(),
            weight_traces: weights.iter().map(Matrix::frobenius_sq).collect(),
            layer_residuals,
            neuron_residual,
            wu_residual,
            product_residual,
            alignment,
            sharpness,
        })
    }
}

/// Trains with minibatches drawn with replacement from `source`.
pub fn train<S: BatchSource + ?Sized>(net: &Network, source: &S, tc: &TrainConfig) -> Result<TrainRun> {
    train_with_partner(net, source, tc, None)
}

/// [`train`], also recording the mean hidden-layer alignment with a fixed
/// `partner` network on a 512-sample evaluation set.
pub fn train_with_partner<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    tc: &TrainConfig,
    partner: Option<&Network>,
) -> Result<TrainRun> {
    tc.validate()?;
    let root = Rng::new(tc.seed);
    let mut data_rng = root.child(0);
    let metrics_rng = root.child(1);
    let partner = match partner {
        Some(p) => {
            let eval = source.sample(&mut root.child(2), DEFAULT_EVAL_SAMPLES)?;
            Some((p, eval.x))
        }
        None => None,
    };
    let recorder = Recorder {
        source,
        tc,
        rng: metrics_rng,
        partner,
    };

    let mut current = net.clone();
    let mut records = vec![recorder.record(&current, 0, tc.steps == 0)?];
    let mut diverged = None;
    let mut completed = 0;
    for step in 1..=tc.steps {
        let cfg = tc.at_step(step - 1);
        let batch = source.sample(&mut data_rng, cfg.batch_size)?;
        match sgd_step(&current, &batch, &cfg, tc.decoupled_decay) {
            Ok(next) => current = next,
            Err(Error::Diverged { norm, .. }) => {
                diverged = Some(Divergence { step, norm });
                break;
            }
            Err(e) => return Err(e),
        }
        completed = step;
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 {
            if let Some(dir) = &tc.checkpoint_dir {
                current.save_checkpoint(dir.join(format!("step_{step}")))?;
            }
        }
        if step % tc.record_every == 0 || step == tc.steps {
            records.push(recorder.record(&current, step, step == tc.steps)?);
        }
    }
    Ok(TrainRun {
        network: current,
        records,
        diverged,
        steps_completed: completed,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the trajectory with a fixed column order: step, lr, loss, entropy,
/// entropy_se, grad_trace_i…, weight_trace_i…, layer_residual_i…,
/// neuron_residual, wu_residual, product_residual, alignment, sharpness,
/// sharpness_se, lambda_max, eta_lambda_max.
pub fn write_trajectory_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let layers = records.first().map_or(0, |r| r.weight_traces.len());
    let pairs = records.iter().map(|r| r.layer_residuals.len()).max().unwrap_or(0);
    let mut header = vec!["step".to_string(), "lr".into(), "loss".into(), "entropy".into(), "entropy_se".into()];
    header.extend((1..=layers).map(|i| format!("grad_trace_{i}")));
    header.extend((1..=layers).map(|i| format!("weight_trace_{i}")));
    header.extend((1..=pairs).map(|i| format!("layer_residual_{i}")));
    for h in [
        "neuron_residual",
        "wu_residual",
        "product_residual",
        "alignment",
        "sharpness",
        "sharpness_se",
        "lambda_max",
        "eta_lambda_max",
    ] {
        header.push(h.into());
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.entropy.value.to_string(),
            r.entropy.std_err.to_string(),
        ];
        row.extend(r.grad_traces.iter().map(f64::to_string));
        row.extend(r.weight_traces.iter().map(f64::to_string));
        row.extend((0..pairs).map(|i| opt(r.layer_residuals.get(i).copied())));
        row.push(opt(r.neuron_residual));
        row.push(opt(r.wu_residual));
        row.push(opt(r.product_residual));
        row.push(opt(r.alignment));
        row.push(opt(r.sharpness.map(|s| s.trace.value)));
        row.push(opt(r.sharpness.map(|s| s.trace.std_err)));
        row.push(opt(r.sharpness.map(|s| s.lambda_max)));
        row.push(opt(r.eta_lambda_max()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to rerun a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub initial: Network,
    pub library_version: String,
    pub wall_time_secs: f64,
    pub steps_completed: usize,
    pub diverged: Option<Divergence>,
}

/// Runs [`train`] and writes `trajectory.csv`, `manifest.json` and a final
/// checkpoint into `out_dir`.
pub fn train_to_dir<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    tc: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainRun> {
    std::fs::create_dir_all(out_dir)?;
    let t0 = Instant::now();
    let run = train(net, source, tc)?;
    write_trajectory_csv(&out_dir.join("trajectory.csv"), &run.records)?;
    let manifest = RunManifest {
        config: tc.clone(),
        initial: net.clone(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: t0.elapsed().as_secs_f64(),
        steps_completed: run.steps_completed,
        diverged: run.diverged,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    run.network.save_checkpoint(out_dir.join("final"))?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DataModel;

    fn scalar_net(w: f64) -> Network {
        Network::new(Architecture::DeepLinear, vec![Matrix::scalar(w)]).unwrap()
    }

    #[test]
    fn sgd_step_examples() {
        let b = Batch::new(Matrix::scalar(1.0), Matrix::scalar(0.0)).unwrap();
        let next = sgd_step(&scalar_net(1.0), &b, &EntropicConfig::new(0.1, 0.0, 1), false).unwrap();
        assert!((next.weight(0)[(0, 0)] - 0.8).abs() < 1e-15);

        let still = Batch::new(Matrix::scalar(1.0), Matrix::scalar(1.0)).unwrap();
        let same = sgd_step(&scalar_net(1.0), &still, &EntropicConfig::new(0.1, 0.0, 1), false).unwrap();
        assert_eq!(same.weight(0)[(0, 0)], 1.0);

        let (eta, gamma) = (0.1, 0.05);
        let decayed = sgd_step(&scalar_net(1.0), &still, &EntropicConfig::new(eta, gamma, 1), false).unwrap();
        assert!((decayed.weight(0)[(0, 0)] - (1.0 - 2.0 * eta * gamma)).abs() < 1e-15);
        let dec = sgd_step(&scalar_net(1.0), &still, &EntropicConfig::new(eta, gamma, 1), true).unwrap();
        assert!((dec.weight(0)[(0, 0)] - (1.0 - 2.0 * eta * gamma)).abs() < 1e-15);

        let blow = sgd_step(&scalar_net(1e9), &b, &EntropicConfig::new(0.1, 0.0, 1), false);
        assert!(matches!(blow, Err(Error::Diverged { .. })));
    }

    fn small_setup() -> (Network, DataModel) {
        let mut rng = Rng::new(11);
        let net = Network::random(Architecture::DeepLinear, &[3, 4, 2], &mut rng, 1.0).unwrap();
        let v = crate::numerics::gaussian_matrix(&mut rng, 2, 3, None).unwrap();
        (net, DataModel::isotropic(v, 0.1).unwrap())
    }

    #[test]
    fn schedule_and_records() {
        let (net, dm) = small_setup();
        let mut tc = TrainConfig::new(EntropicConfig::new(0.05, 0.0, 8), 50, 10, 3);
        tc.metrics.batches = 8;
        tc.metrics.sharpness_every = 0;
        tc.metrics.final_probes = 4;
        tc.lr_schedule = vec![LrPhase { from_step: 20, multiplier: 0.1 }];
        assert_eq!(tc.multiplier(19), 1.0);
        assert_eq!(tc.multiplier(20), 0.1);
        let run = train(&net, &dm, &tc).unwrap();
        let steps: Vec<usize> = run.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40, 50]);
        assert!(run.records[..5].iter().all(|r| r.sharpness.is_none()));
        assert!(run.last().sharpness.is_some());
        assert!((run.records[3].lr - 0.005).abs() < 1e-15);
        assert_eq!(run.last().layer_residuals.len(), 1);
        assert!(run.last().wu_residual.is_some() && run.last().product_residual.is_some());

        let again = train(&net, &dm, &tc).unwrap();
        assert_eq!(run.records, again.records);
        assert_eq!(run.network.params().data, again.network.params().data);

        tc.steps = 0;
        assert_eq!(train(&net, &dm, &tc).unwrap().records.len(), 1);
    }

    #[test]
    fn stable_quadratic_descends() {
        let dm = DataModel::new(Matrix::scalar(0.5), Matrix::scalar(1.0), Matrix::scalar(1e-12)).unwrap();
        let mut tc = TrainConfig::new(EntropicConfig::new(0.1, 0.0, 4), 40, 1, 0);
        tc.metrics.balance = false;
        tc.metrics.batches = 2;
        tc.metrics.final_sharpness = false;
        tc.metrics.sharpness_every = 0;
        let run = train(&scalar_net(2.0), &dm, &tc).unwrap();
        for w in run.records.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-12);
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let (net, dm) = small_setup();
        let mut tc = TrainConfig::new(EntropicConfig::new(5.0, 0.0, 8), 200, 50, 1);
        tc.metrics.batches = 2;
        tc.metrics.final_sharpness = false;
        let run = train(&net, &dm, &tc).unwrap();
        assert!(run.diverged.is_some());
        assert!(run.steps_completed < 200);
    }

    #[test]
    fn files_written() {
        let (net, dm) = small_setup();
        let mut tc = TrainConfig::new(EntropicConfig::new(0.05, 0.0, 8), 20, 10, 3);
        tc.metrics.batches = 4;
        tc.metrics.final_probes = 2;
        tc.metrics.sharpness_every = 10;
        tc.metrics.sharpness_probes = 2;
        let dir = tempfile::tempdir().unwrap();
        train_to_dir(&net, &dm, &tc, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert!(csv.starts_with("step,lr,loss,entropy,entropy_se,grad_trace_1,grad_trace_2,weight_trace_1"));
        assert_eq!(csv.lines().count(), 4);
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.config, tc);
        assert!(Network::load_checkpoint(dir.path().join("final")).is_ok());
    }
}
