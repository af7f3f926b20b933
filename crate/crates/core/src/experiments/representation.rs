//! Closed-form deep-linear solutions and representation alignment between
//! independently trained networks.

use serde::{Deserialize, Serialize};

use super::balance::finished;
use super::{require, Check, Outcome, Row};
use crate::alignment::{gram_alignment, procrustes_fit, DEFAULT_EVAL_SAMPLES};
use crate::closedform::{deep_linear_solution, deep_linear_wd_solution, predicted_c0, DeepLinearSolution, Normalization};
use crate::datagen::{conditioned_matrix, BatchSource, DataModel};
use crate::entropic::EntropicConfig;
use crate::error::Result;
use crate::models::{Architecture, Network};
use crate::numerics::{gaussian_matrix, Matrix, Rng};
use crate::stats::mean;
use crate::symmetry::{master_balance_residual, Generator};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedFormParams {
    pub dim: usize,
    pub widths: Vec<usize>,
    pub embedding_cond: f64,
    pub eta: f64,
    pub batch_size: usize,
    /// Batches for the balance residual at the constructed solution.
    pub balance_batches: usize,
    pub seed: u64,
}

impl Default for ClosedFormParams {
    fn default() -> Self {
        Self {
            dim: 3,
            widths: vec![4, 5],
            embedding_cond: 3.0,
            eta: 0.01,
            batch_size: 16,
            balance_batches: 4096,
            seed: 1,
        }
    }
}

impl ClosedFormParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dim > 0, "dim must be positive")?;
        require(self.widths.iter().all(|&w| w >= self.dim), "hidden widths must be at least dim")?;
        require(self.embedding_cond >= 1.0, "embedding_cond must be at least 1")?;
        require(self.eta > 0.0 && self.balance_batches > 1, "eta and balance_batches must be positive")
    }
}

/// A random symmetric positive-definite matrix with spectrum in `[0.5, 2]`.
fn random_spd(rng: &mut Rng, d: usize) -> Result<Matrix> {
    let q = crate::numerics::random_orthonormal(rng, d, d)?;
    let s: Vec<f64> = (0..d).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
    Ok(q.dot(&Matrix::from_diag(&s)).dot_tr(&q))
}

fn orthonormality_error(u: &Matrix) -> f64 {
    (&u.tr_dot(u) - &Matrix::identity(u.cols())).max_abs()
}

/// Consistency of the constructed solutions: they reproduce the teacher,
/// their factors are orthonormal, the gradient noise is balanced between
/// layers at the entropic solution, and the weight-decay solution has equal
/// layer norms.
pub fn closed_form(p: &ClosedFormParams) -> Result<Outcome> {
    p.validate()?;
    let d = p.dim;
    let depth = p.widths.len() + 1;
    let mut rng = Rng::new(p.seed);
    let v = gaussian_matrix(&mut rng, d, d, None)?;
    let dm = DataModel::new(v.clone(), random_spd(&mut rng, d)?, random_spd(&mut rng, d)?)?;
    let ms: Vec<Matrix> = (0..3)
        .map(|_| conditioned_matrix(&mut rng, d, p.embedding_cond))
        .collect::<Result<_>>()?;
    let sol = deep_linear_solution(
        &dm,
        Some(&ms[0]),
        Some(&ms[1]),
        Some(&ms[2]),
        depth,
        &p.widths,
        Normalization::Balanced,
        &mut rng,
    )?;
    let wd = deep_linear_wd_solution(&v, Some(&ms[0]), Some(&ms[1]), Some(&ms[2]), depth, &p.widths, &mut rng)?;

    let mut out = Outcome::default();
    let recon = sol.network()?.end_to_end()?.rel_diff(&v);
    let recon_wd = wd.network()?.end_to_end()?.rel_diff(&v);
    let ortho = sol.factors.iter().map(orthonormality_error).fold(0.0, f64::max);
    let traces: Vec<f64> = wd.weights.iter().map(Matrix::frobenius_sq).collect();
    let spread = traces.iter().map(|t| (t - traces[0]).abs()).fold(0.0, f64::max);
    for (i, t) in traces.iter().enumerate() {
        out.rows.push(Row::new("wd_solution", (i + 1) as f64, "weight_trace", *t));
    }

    let net = sol.network()?;
    let cfg = EntropicConfig::new(p.eta, 0.0, p.batch_size).with_batches(p.balance_batches);
    let mut worst_z: f64 = 0.0;
    for i in 0..depth - 1 {
        let gen = Generator::layer_rescaling(&net.layout(), i, i + 1)?;
        let r = master_balance_residual(&net, &dm, &gen, &cfg, &Rng::new(p.seed).child(i as u64))?;
        let z = if r.std_err > 0.0 { r.value.abs() / r.std_err } else { 0.0 };
        out.rows.push(Row::new("master_balance", (i + 1) as f64, "value", r.value));
        out.rows.push(Row::new("master_balance", (i + 1) as f64, "std_err", r.std_err));
        out.rows.push(Row::new("master_balance", (i + 1) as f64, "magnitude", r.magnitude));
        worst_z = worst_z.max(z);
    }

    out.note("reconstruction_error", recon);
    out.note("wd_reconstruction_error", recon_wd);
    out.note("orthonormality_error", ortho);
    out.note("wd_trace_spread", spread);
    out.note("balance_max_z", worst_z);
    out.push(Check::below(7, "entropic solution reconstructs V", recon, 1e-8));
    out.push(Check::below(7, "weight-decay solution reconstructs V", recon_wd, 1e-8));
    out.push(Check::below(7, "factor orthonormality", ortho, 1e-10));
    out.push(Check::at_most(7, "balance residual in standard errors", worst_z, 3.0));
    out.push(Check::below(7, "weight-decay trace spread", spread, 1e-10));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentParams {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    pub noise: f64,
    pub embedding_cond: f64,
    pub init_scale: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight decay of the comparison run; 0 skips it.
    pub weight_decay: f64,
    pub eval_samples: usize,
    pub min_gram: f64,
    pub max_procrustes: f64,
    pub c0_tolerance: f64,
    pub min_decay_drop: f64,
    pub seed: u64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self {
            dim: 4,
            width: 16,
            depth: 4,
            noise: 0.25,
            embedding_cond: 5.0,
            init_scale: 0.3,
            eta: 0.01,
            batch_size: 16,
            steps: 200_000,
            weight_decay: 0.01,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            min_gram: 0.95,
            max_procrustes: 0.15,
            c0_tolerance: 0.15,
            min_decay_drop: 0.10,
            seed: 5,
        }
    }
}

impl AlignmentParams {
    pub fn validate(&self) -> Result<()> {
        require(self.depth >= 2, "alignment needs hidden layers")?;
        require(self.width >= self.dim && self.dim > 0, "width must be at least dim")?;
        require(self.embedding_cond >= 1.0, "embedding_cond must be at least 1")?;
        require(self.eta > 0.0 && self.noise > 0.0, "eta and noise must be positive")?;
        require(self.weight_decay >= 0.0, "weight_decay must be non-negative")?;
        require(self.eval_samples >= 2, "need at least two evaluation samples")
    }
}

struct Member {
    init: Network,
    solution: DeepLinearSolution,
    wd: Network,
}

struct PairStats {
    grams: Vec<f64>,
    max_procrustes: f64,
    max_c0_error: f64,
}

fn hidden_reprs(net: &Network, x: &Matrix) -> Result<Vec<Matrix>> {
    (1..net.depth()).map(|l| net.representation(x, l)).collect()
}

fn compare(out: &mut Outcome, series: &str, a: &Network, b: &Network, members: &[Member], x: &Matrix) -> Result<PairStats> {
    let (ra, rb) = (hidden_reprs(a, x)?, hidden_reprs(b, x)?);
    let mut stats = PairStats {
        grams: Vec::new(),
        max_procrustes: 0.0,
        max_c0_error: 0.0,
    };
    for (i, ha) in ra.iter().enumerate() {
        for (j, hb) in rb.iter().enumerate() {
            let x = (i * rb.len() + j) as f64;
            let g = gram_alignment(ha, hb)?;
            let fit = procrustes_fit(ha, hb)?;
            let c0 = predicted_c0(&members[0].solution, i + 1, &members[1].solution, j + 1)?;
            let err = (fit.c0 / c0 - 1.0).abs();
            out.rows.push(Row::new(series, x, "gram_cosine", g));
            out.rows.push(Row::new(series, x, "procrustes_residual", fit.residual));
            out.rows.push(Row::new(series, x, "procrustes_c0", fit.c0));
            out.rows.push(Row::new(series, x, "predicted_c0", c0));
            stats.grams.push(g);
            stats.max_procrustes = stats.max_procrustes.max(fit.residual);
            stats.max_c0_error = stats.max_c0_error.max(err);
        }
    }
    Ok(stats)
}

/// Two deep-linear networks, each seeing the data through its own random
/// embeddings, trained from independent inits. Without weight decay their
/// hidden layers align up to rotation and a predicted scale; with weight
/// decay the alignment drops. Layer pairs are indexed `x = i·(D−1) + j`.
pub fn alignment(p: &AlignmentParams) -> Result<Outcome> {
    p.validate()?;
    let d = p.dim;
    let mut rng = Rng::new(p.seed);
    let v = gaussian_matrix(&mut rng, d, d, None)?;
    let dm = DataModel::isotropic(v, p.noise)?;
    let x = dm.sample(&mut rng.child(999), p.eval_samples)?.x;
    let widths = vec![p.width; p.depth - 1];
    let mut dims = vec![d];
    dims.extend(&widths);
    dims.push(d);

    let members: Vec<Member> = (0..2u64)
        .map(|n| {
            let mut r = rng.child(n + 10);
            let ms: Vec<Matrix> = (0..3)
                .map(|_| conditioned_matrix(&mut r, d, p.embedding_cond))
                .collect::<Result<_>>()?;
            let init = Network::random(Architecture::DeepLinear, &dims, &mut r, p.init_scale)?.with_embeddings(
                Some(ms[0].clone()),
                Some(ms[1].clone()),
                Some(ms[2].clone()),
            )?;
            let solution = deep_linear_solution(
                &dm,
                Some(&ms[0]),
                Some(&ms[1]),
                Some(&ms[2]),
                p.depth,
                &widths,
                Normalization::Balanced,
                &mut r,
            )?;
            let wd = deep_linear_wd_solution(dm.v(), Some(&ms[0]), Some(&ms[1]), Some(&ms[2]), p.depth, &widths, &mut r)?
                .network()?;
            Ok(Member { init, solution, wd })
        })
        .collect::<Result<_>>()?;

    let trained = |gamma: f64| -> Result<Vec<Network>> {
        members
            .iter()
            .enumerate()
            .map(|(n, m)| {
                let mut tc = TrainConfig::new(
                    EntropicConfig::new(p.eta, gamma, p.batch_size),
                    p.steps,
                    (p.steps / 10).max(1),
                    p.seed * 10 + n as u64,
                );
                tc.metrics.sharpness_every = 0;
                tc.metrics.final_sharpness = false;
                tc.metrics.batches = 16;
                Ok(finished(train(&m.init, &dm, &tc)?)?.network)
            })
            .collect()
    };

    let mut out = Outcome::default();
    let plain = trained(0.0)?;
    let s = compare(&mut out, "no_decay", &plain[0], &plain[1], &members, &x)?;
    let gmin = s.grams.iter().copied().fold(f64::INFINITY, f64::min);
    let gmean = mean(&s.grams);
    out.note("gram_min", gmin);
    out.note("gram_mean", gmean);
    out.note("procrustes_max", s.max_procrustes);
    out.note("c0_max_relative_error", s.max_c0_error);
    out.push(Check::at_least(8, "min pairwise Gram cosine", gmin, p.min_gram));
    out.push(Check::at_most(8, "max Procrustes residual", s.max_procrustes, p.max_procrustes));
    out.push(Check::at_most(8, "max c0 relative error", s.max_c0_error, p.c0_tolerance));

    let wd_closed = compare(&mut out, "wd_closed_form", &members[0].wd, &members[1].wd, &members, &x)?;
    out.note("wd_closed_form_gram_mean", mean(&wd_closed.grams));
    if p.weight_decay > 0.0 {
        let decayed = trained(p.weight_decay)?;
        let sd = compare(&mut out, "weight_decay", &decayed[0], &decayed[1], &members, &x)?;
        let dmean = mean(&sd.grams);
        out.note("decay_gram_mean", dmean);
        out.push(Check::at_least(9, "mean Gram drop under weight decay", gmean - dmean, p.min_decay_drop));
    }
    Ok(out)
}
