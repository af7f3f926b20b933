//! Sharpness recipes: the entropic optimum of a two-layer linear network,
//! the edge-of-stability sweep, symmetry orbits and scale invariance.

use serde::{Deserialize, Serialize};

use super::balance::{finished, plain_config};
use super::{require, Check, Outcome, Row};
use crate::closedform::direct_sharpness_two_layer;
use crate::datagen::{BatchSource, DataModel, FixedDataset};
use crate::entropic::{batch_gradient_samples, free_energy, EntropicConfig, FreeEnergy};
use crate::error::Result;
use crate::models::{Architecture, Network};
use crate::numerics::{gaussian_matrix, Matrix, Rng};
use crate::stats::{moving_average, spearman, Estimate};
use crate::symmetry::Generator;
use crate::trainer::{measure_sharpness, run_sweep, train, SweepAxis, SweepGrid, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharpnessParams {
    pub phis: Vec<f64>,
    pub hidden: usize,
    pub init_scale: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub probes: usize,
    pub tolerance: f64,
    /// Relative tolerance for the balanced-noise case to attain the minimum.
    pub minimum_tolerance: f64,
    pub seed: u64,
}

impl Default for SharpnessParams {
    fn default() -> Self {
        Self {
            phis: vec![1.0, 0.5, 0.25],
            hidden: 2,
            init_scale: 0.5,
            eta: 0.01,
            batch_size: 8,
            steps: 100_000,
            probes: 4096,
            tolerance: 0.10,
            minimum_tolerance: 0.05,
            seed: 1,
        }
    }
}

impl SharpnessParams {
    pub fn validate(&self) -> Result<()> {
        require(!self.phis.is_empty(), "need at least one phi")?;
        require(self.phis.iter().all(|&p| p > 0.0 && p <= 1.0), "phi must lie in (0, 1]")?;
        require(self.hidden >= 2, "hidden width must be at least 2")?;
        require(self.eta > 0.0 && self.probes > 0, "eta and probes must be positive")
    }
}

/// `2d(Tr Σε^{1/2} + Tr Σε^{−1/2})` for `Σε = diag(1, φ)`, `d = 2`.
pub fn entropic_sharpness_target(phi: f64) -> f64 {
    4.0 * ((1.0 + phi.sqrt()) + (1.0 + 1.0 / phi.sqrt()))
}

/// Two-layer linear networks on `d = 2`, `V = Σx = I`, `Σε = diag(1, φ)`:
/// SGD settles where the total sharpness matches the entropic prediction.
pub fn sharpness_closed_form(p: &SharpnessParams) -> Result<Outcome> {
    p.validate()?;
    let mut out = Outcome::default();
    let mut measured = Vec::new();
    for &phi in &p.phis {
        let dm = DataModel::with_balance(Matrix::identity(2), Matrix::identity(2), phi)?;
        let mut rng = Rng::new(p.seed);
        let net = Network::random(Architecture::DeepLinear, &[2, p.hidden, 2], &mut rng, p.init_scale)?;
        let mut tc = TrainConfig::new(EntropicConfig::new(p.eta, 0.0, p.batch_size), p.steps, p.steps / 10, p.seed);
        tc.metrics.sharpness_every = 0;
        tc.metrics.final_probes = p.probes;
        let run = finished(train(&net, &dm, &tc)?)?;
        let s = run.last().sharpness.expect("final record carries sharpness");
        let w = run.network.weights();
        let exact = direct_sharpness_two_layer(&w[0], &w[1], dm.sigma_x(), 2)?;
        let target = entropic_sharpness_target(phi);
        out.rows.push(Row::new("hutchinson", phi, "trace", s.trace.value));
        out.rows.push(Row::new("hutchinson", phi, "std_err", s.trace.std_err));
        out.rows.push(Row::new("exact", phi, "trace", exact));
        out.rows.push(Row::new("target", phi, "trace", target));
        out.note(&format!("trace_phi_{phi}"), s.trace.value);
        out.note(&format!("exact_phi_{phi}"), exact);
        out.push(Check::within(
            10,
            format!("relative error at phi={phi}"),
            (s.trace.value - target) / target,
            0.0,
            p.tolerance,
        ));
        let minimum = 16.0;
        if phi == 1.0 {
            out.push(Check::within(
                10,
                "balanced noise attains the minimum",
                s.trace.value / minimum - 1.0,
                0.0,
                p.minimum_tolerance,
            ));
        } else {
            out.push(Check::above(10, format!("exceeds the minimum at phi={phi}"), s.trace.value, minimum));
        }
        measured.push((phi, s.trace.value));
    }
    let mut by_phi = measured.clone();
    by_phi.sort_by(|a, b| b.0.total_cmp(&a.0));
    let monotone = by_phi.windows(2).all(|w| w[1].1 > w[0].1);
    out.push(Check::with(
        10,
        "increases as phi decreases",
        monotone as u8 as f64,
        "= 1".into(),
        monotone,
    ));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EosSweepParams {
    pub etas: Vec<f64>,
    pub phis: Vec<f64>,
    pub hidden: usize,
    pub input_scale: f64,
    pub noise: f64,
    pub init_scale: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub probes: usize,
    /// Empirical edge of stability `2 − ε`.
    pub epsilon: f64,
    /// Upper bound on `η·λ_max` of every stable cell.
    pub bound: f64,
    pub max_rho: f64,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for EosSweepParams {
    fn default() -> Self {
        Self {
            etas: (0..11).map(|i| 0.01 + 0.019 * i as f64).collect(),
            phis: (0..12).map(|i| (i as f64 + 0.5) / 12.0).collect(),
            hidden: 2,
            input_scale: 2.5,
            noise: 0.005,
            init_scale: 0.5,
            batch_size: 32,
            steps: 30_000,
            probes: 4,
            epsilon: 0.1,
            bound: 2.15,
            max_rho: -0.5,
            parallelism: 8,
            seed: 1,
        }
    }
}

impl EosSweepParams {
    pub fn validate(&self) -> Result<()> {
        require(!self.etas.is_empty() && !self.phis.is_empty(), "the grid must be non-empty")?;
        require(self.etas.iter().all(|&e| e > 0.0), "learning rates must be positive")?;
        require(self.phis.iter().all(|&p| p > 0.0 && p <= 1.0), "phi must lie in (0, 1]")?;
        require(self.parallelism > 0, "parallelism must be positive")?;
        require(self.noise > 0.0 && self.input_scale > 0.0, "noise and input scale must be positive")
    }
}

/// Learning rate × noise balance grid on two-layer linear networks
/// (`V = I`, `Σx = sI`, `Σε = σ²·diag(1, φ)`): records `η·λ_max` at the end
/// of each stable run.
pub fn eos_sweep(p: &EosSweepParams) -> Result<Outcome> {
    p.validate()?;
    let grid = SweepGrid::new(
        vec![SweepAxis::new("eta", p.etas.clone()), SweepAxis::new("phi", p.phis.clone())],
        p.seed,
    );
    let results = run_sweep(&grid, p.parallelism, |cell| -> Result<Option<f64>> {
        let (eta, phi) = (cell.coords[0], cell.coords[1]);
        let dm = DataModel::new(
            Matrix::identity(2),
            Matrix::identity(2).scale(p.input_scale),
            Matrix::from_diag(&[p.noise, p.noise * phi]),
        )?;
        let mut rng = Rng::new(cell.seed);
        let net = Network::random(Architecture::DeepLinear, &[2, p.hidden, 2], &mut rng, p.init_scale)?;
        let mut tc = plain_config(EntropicConfig::new(eta, 0.0, p.batch_size), p.steps, p.steps, cell.seed);
        tc.metrics.batches = 4;
        tc.metrics.final_sharpness = true;
        tc.metrics.final_probes = p.probes;
        let run = train(&net, &dm, &tc)?;
        Ok(match run.diverged {
            Some(_) => None,
            None => run.last().eta_lambda_max(),
        })
    })?;

    let mut out = Outcome::default();
    let mut worst: f64 = 0.0;
    let mut largest_stable: Option<(f64, Vec<f64>)> = None;
    let mut stable_cells = 0;
    for (ie, &eta) in p.etas.iter().enumerate() {
        let mut row = Vec::new();
        let mut all = true;
        for ip in 0..p.phis.len() {
            let r = &results[ie * p.phis.len() + ip];
            match &r.outcome {
                Ok(Some(v)) => {
                    out.rows.push(Row::new(format!("eta={eta}"), p.phis[ip], "eta_lambda_max", *v));
                    worst = worst.max(*v);
                    stable_cells += 1;
                    row.push(*v);
                }
                Ok(None) => {
                    out.rows.push(Row::new(format!("eta={eta}"), p.phis[ip], "diverged", 1.0));
                    all = false;
                }
                Err(e) => {
                    out.notes.push(format!("cell eta={eta} phi={}: {e}", p.phis[ip]));
                    all = false;
                }
            }
        }
        if all && largest_stable.as_ref().map_or(true, |(e, _)| eta > *e) {
            largest_stable = Some((eta, row));
        }
    }
    out.note("max_eta_lambda_max", worst);
    out.note("stable_cells", stable_cells as f64);
    out.note("edge", 2.0 - p.epsilon);
    out.push(Check::at_most(11, "max eta*lambda_max over stable cells", worst, p.bound));
    match largest_stable {
        Some((eta, vals)) => {
            let rho = spearman(&p.phis, &vals);
            out.note("largest_stable_eta", eta);
            out.note("rho_at_largest_stable_eta", rho);
            out.push(Check::below(11, "Spearman rho(phi, eta*lambda_max)", rho, p.max_rho));
        }
        None => out.push(Check::with(11, "a fully stable learning rate exists", 0.0, "= 1".into(), false)),
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitScanParams {
    pub hidden: usize,
    pub phi: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambdas: Vec<f64>,
    pub probes: usize,
    /// `λ` at which the free energy is compared with the origin.
    pub free_energy_lambda: f64,
    pub eval_samples: usize,
    pub entropy_batches: usize,
    pub sharpness_ratio: f64,
    pub seed: u64,
}

impl Default for OrbitScanParams {
    fn default() -> Self {
        Self {
            hidden: 4,
            phi: 0.5,
            eta: 0.01,
            batch_size: 8,
            steps: 20_000,
            lambdas: (-6..=6).map(|i| i as f64 * 0.5).collect(),
            probes: 256,
            free_energy_lambda: 0.5,
            eval_samples: 300_000,
            entropy_batches: 1024,
            sharpness_ratio: 10.0,
            seed: 1,
        }
    }
}

impl OrbitScanParams {
    pub fn validate(&self) -> Result<()> {
        require(self.hidden >= 2, "hidden width must be at least 2")?;
        require(self.phi > 0.0 && self.phi <= 1.0, "phi must lie in (0, 1]")?;
        require(self.lambdas.contains(&0.0), "lambdas must include 0")?;
        require(self.eta > 0.0 && self.probes > 0, "eta and probes must be positive")
    }
}

fn free_energy_rows(out: &mut Outcome, series: &str, lambda: f64, f: &FreeEnergy) {
    out.rows.push(Row::new(series, lambda, "free_energy", f.total()));
    out.rows.push(Row::new(series, lambda, "loss", f.loss.value));
    out.rows.push(Row::new(series, lambda, "loss_se", f.loss.std_err));
    out.rows.push(Row::new(series, lambda, "entropy", f.entropy.value));
    out.rows.push(Row::new(series, lambda, "entropy_se", f.entropy.std_err));
}

/// Along the layer-rescaling orbit of a trained two-layer linear network the
/// loss is constant but sharpness and free energy are not; a hidden-unit
/// permutation leaves the free energy unchanged exactly.
pub fn orbit_scan(p: &OrbitScanParams) -> Result<Outcome> {
    p.validate()?;
    let dm = DataModel::with_balance(Matrix::identity(2), Matrix::identity(2), p.phi)?;
    let mut rng = Rng::new(p.seed);
    let net = Network::random(Architecture::DeepLinear, &[2, p.hidden, 2], &mut rng, 0.5)?;
    let cfg = EntropicConfig::new(p.eta, 0.0, p.batch_size);
    let trained = finished(train(&net, &dm, &plain_config(cfg.clone(), p.steps, p.steps, p.seed))?)?.network;
    let gen = Generator::layer_rescaling(&trained.layout(), 0, 1)?;
    let mut out = Outcome::default();

    let probe_rng = Rng::new(p.seed).child(3);
    let sharp = |lambda: f64| -> Result<(f64, f64)> {
        let moved = gen.apply_to(&trained, lambda)?;
        let s = measure_sharpness(&moved, &dm, &cfg, p.probes, &probe_rng)?;
        let w = moved.weights();
        Ok((s.trace.value, direct_sharpness_two_layer(&w[0], &w[1], dm.sigma_x(), 2)?))
    };
    for &l in &p.lambdas {
        let (t, exact) = sharp(l)?;
        out.rows.push(Row::new("orbit", l, "sharpness", t));
        out.rows.push(Row::new("orbit", l, "exact_sharpness", exact));
    }
    let (t0, _) = sharp(0.0)?;
    let (tp, _) = sharp(3.0)?;
    let (tm, _) = sharp(-3.0)?;
    out.note("sharpness_origin", t0);
    out.note("sharpness_plus3", tp);
    out.note("sharpness_minus3", tm);
    out.push(Check::above(12, "T(+3)/T(0)", tp / t0, p.sharpness_ratio));
    out.push(Check::above(12, "T(-3)/T(0)", tm / t0, p.sharpness_ratio));

    // Common random numbers: both free energies see the same evaluation
    // sample and the same batches, and the change is estimated from paired
    // per-sample differences.
    let fe_cfg = cfg.clone().with_eval(p.eval_samples).with_batches(p.entropy_batches);
    let fe_rng = Rng::new(p.seed).child(4);
    let moved = gen.apply_to(&trained, p.free_energy_lambda)?;
    let f0 = free_energy(&trained, &dm, &fe_cfg, &fe_rng)?;
    let f1 = free_energy(&moved, &dm, &fe_cfg, &fe_rng)?;
    free_energy_rows(&mut out, "orbit_free_energy", 0.0, &f0);
    free_energy_rows(&mut out, "orbit_free_energy", p.free_energy_lambda, &f1);
    let eval = dm.sample(&mut fe_rng.child(5), p.eval_samples)?;
    let dl: Vec<f64> = moved.losses(&eval)?.iter().zip(trained.losses(&eval)?).map(|(a, b)| a - b).collect();
    // The loss is invariant up to roundoff; floor its error bar there so the
    // z-score does not measure floating-point noise.
    let mut dl = Estimate::from_samples(&dl);
    dl.std_err = dl.std_err.max(1e-12 * f0.loss.value.abs());
    let entropy_terms = |n: &Network| -> Result<Vec<f64>> {
        let g = batch_gradient_samples(n, &dm, fe_cfg.batch_size, fe_cfg.n_batches, &fe_rng.child(6))?;
        Ok(g.iter().map(|g| 0.25 * p.eta * g.norm_sq()).collect())
    };
    let ds: Vec<f64> = entropy_terms(&moved)?.iter().zip(entropy_terms(&trained)?).map(|(a, b)| a - b).collect();
    let ds = Estimate::from_samples(&ds);
    let df = Estimate {
        value: dl.value + ds.value,
        std_err: dl.std_err.hypot(ds.std_err),
    };
    out.note("free_energy_change", df.value);
    out.note("free_energy_change_se", df.std_err);
    out.note("loss_change", dl.value);
    out.note("loss_change_se", dl.std_err);
    out.note("unpaired_free_energy_se", f0.std_err().hypot(f1.std_err()));
    out.push(Check::above(14, "|dF| in standard errors", df.z_score(), 5.0));
    out.push(Check::below(14, "|dL| in standard errors", dl.z_score(), 2.0));

    // A permutation acts within the fixed batches, so F agrees up to the
    // order of floating-point summation.
    let fixed = FixedDataset::new(dm.sample(&mut Rng::new(p.seed).child(5), 4096)?)?;
    let perm: Vec<usize> = (0..p.hidden).rev().collect();
    let permuted = trained.permute_hidden(0, &perm)?;
    let small_cfg = cfg.with_eval(4096).with_batches(256);
    let a = free_energy(&trained, &fixed, &small_cfg, &fe_rng)?;
    let b = free_energy(&permuted, &fixed, &small_cfg, &fe_rng)?;
    let rel = (a.total() - b.total()).abs() / a.total().abs();
    out.note("permutation_relative_change", rel);
    out.push(Check::at_most(14, "permutation changes F", rel, 1e-12));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleInvarianceParams {
    pub input_dim: usize,
    pub noise: f64,
    pub init_scale: f64,
    pub eta: f64,
    pub batch_size: usize,
    /// Unrecorded steps before the trajectory, while the direction settles.
    pub burn_in_steps: usize,
    pub steps: usize,
    pub record_every: usize,
    pub probes: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for ScaleInvarianceParams {
    fn default() -> Self {
        Self {
            input_dim: 8,
            noise: 0.1,
            init_scale: 1.0,
            eta: 0.1,
            batch_size: 8,
            burn_in_steps: 5_000,
            steps: 20_000,
            record_every: 500,
            probes: 64,
            window: 5,
            seed: 1,
        }
    }
}

impl ScaleInvarianceParams {
    pub fn validate(&self) -> Result<()> {
        require(self.input_dim > 1, "input_dim must exceed 1")?;
        require(self.eta > 0.0 && self.probes > 0 && self.window > 0, "eta, probes and window must be positive")?;
        require(self.steps >= self.record_every && self.record_every > 0, "steps must cover one record")
    }
}

/// A scale-invariant model under SGD: the weight norm only grows, so the
/// total sharpness falls.
pub fn scale_invariance(p: &ScaleInvarianceParams) -> Result<Outcome> {
    p.validate()?;
    let mut rng = Rng::new(p.seed);
    let v = gaussian_matrix(&mut rng, 1, p.input_dim, None)?;
    let dm = DataModel::isotropic(v, p.noise)?;
    let mut net = Network::random(Architecture::ScaleInvariantToy, &[p.input_dim, 1], &mut rng, p.init_scale)?;
    let cfg = EntropicConfig::new(p.eta, 0.0, p.batch_size);
    if p.burn_in_steps > 0 {
        let burn = plain_config(cfg.clone(), p.burn_in_steps, p.burn_in_steps, p.seed.wrapping_add(1));
        net = finished(train(&net, &dm, &burn)?)?.network;
    }
    let mut tc = plain_config(cfg, p.steps, p.record_every, p.seed);
    tc.metrics.batches = 8;
    tc.metrics.sharpness_every = p.record_every;
    tc.metrics.sharpness_probes = p.probes;
    tc.metrics.final_probes = p.probes;
    tc.metrics.final_sharpness = true;
    let run = finished(train(&net, &dm, &tc)?)?;

    let mut out = Outcome::default();
    let mut trace = Vec::new();
    for r in &run.records {
        let t = r.sharpness.expect("sharpness is measured at every record").trace.value;
        out.rows.push(Row::new("trajectory", r.step as f64, "sharpness", t));
        out.rows.push(Row::new("trajectory", r.step as f64, "weight_norm_sq", r.weight_traces[0]));
        out.rows.push(Row::new("trajectory", r.step as f64, "loss", r.loss));
        trace.push(t);
    }
    let smooth = moving_average(&trace, p.window);
    let worst_rise = smooth.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    out.note("initial_sharpness", trace[0]);
    out.note("final_sharpness", *trace.last().expect("at least one record"));
    out.note("largest_smoothed_rise", worst_rise);
    out.push(Check::at_most(13, "largest rise of smoothed sharpness", worst_rise, 0.0));
    Ok(out)
}
