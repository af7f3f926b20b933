//! Config-driven experiment recipes. Each recipe trains what it needs,
//! emits its data in long format (one row per measurement) and returns
//! pass/fail checks against the thresholds for its kind.

mod balance;
mod curvature;
mod dynamics;
mod representation;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use balance::{
    layer_balance, neuron_balance, polynomial_balance, weight_balance, wu_alignment, LayerBalanceParams,
    NeuronBalanceParams, PolynomialBalanceParams, WeightBalanceParams, WuAlignmentParams,
};
pub use curvature::{
    eos_sweep, orbit_scan, scale_invariance, sharpness_closed_form, EosSweepParams, OrbitScanParams,
    ScaleInvarianceParams, SharpnessParams,
};
pub use dynamics::{entropic_order, lr_drop, EntropicOrderParams, LrDropParams};
pub use representation::{alignment, closed_form, AlignmentParams, ClosedFormParams};

/// One measurement in plot-ready long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub series: String,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

impl Row {
    pub fn new(series: impl Into<String>, x: f64, metric: impl Into<String>, value: f64) -> Self {
        Self {
            series: series.into(),
            x,
            metric: metric.into(),
            value,
        }
    }
}

/// A thresholded verdict. `criterion` is the acceptance item it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn below(criterion: u32, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::with(criterion, name, value, format!("< {limit}"), value < limit)
    }

    pub fn at_most(criterion: u32, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::with(criterion, name, value, format!("<= {limit}"), value <= limit)
    }

    pub fn above(criterion: u32, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::with(criterion, name, value, format!("> {limit}"), value > limit)
    }

    pub fn at_least(criterion: u32, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::with(criterion, name, value, format!(">= {limit}"), value >= limit)
    }

    pub fn within(criterion: u32, name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Self::with(
            criterion,
            name,
            value,
            format!("{target} ± {tol}"),
            (value - target).abs() <= tol,
        )
    }

    pub fn with(criterion: u32, name: impl Into<String>, value: f64, bound: String, passed: bool) -> Self {
        Self {
            criterion,
            name: name.into(),
            value,
            bound,
            passed: passed && !value.is_nan(),
        }
    }
}

/// Everything a recipe produced.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub checks: Vec<Check>,
    /// Headline scalars.
    pub summary: BTreeMap<String, f64>,
    pub rows: Vec<Row>,
    /// Per-cell failures and other remarks.
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Whether every check of acceptance item `criterion` passed; `None`
    /// when the outcome holds no check for it.
    pub fn criterion_passed(&self, criterion: u32) -> Option<bool> {
        let mut any = false;
        let mut all = true;
        for c in self.checks.iter().filter(|c| c.criterion == criterion) {
            any = true;
            all &= c.passed;
        }
        any.then_some(all)
    }

    pub fn criteria(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.checks.iter().map(|c| c.criterion).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub(crate) fn note(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_string(), value);
    }

    pub(crate) fn push(&mut self, check: Check) {
        self.checks.push(check);
    }
}

/// Parameters of one experiment kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ExperimentParams {
    Balance(LayerBalanceParams),
    NeuronBalance(NeuronBalanceParams),
    WeightBalance(WeightBalanceParams),
    WuAlignment(WuAlignmentParams),
    PolynomialBalance(PolynomialBalanceParams),
    ClosedForm(ClosedFormParams),
    Alignment(AlignmentParams),
    SharpnessClosedForm(SharpnessParams),
    EosSweep(EosSweepParams),
    OrbitScan(OrbitScanParams),
    ScaleInvariance(ScaleInvarianceParams),
    EntropicOrder(EntropicOrderParams),
    LrDrop(LrDropParams),
}

impl ExperimentParams {
    pub const KINDS: [&'static str; 13] = [
        "balance",
        "neuron_balance",
        "weight_balance",
        "wu_alignment",
        "polynomial_balance",
        "closed_form",
        "alignment",
        "sharpness_closed_form",
        "eos_sweep",
        "orbit_scan",
        "scale_invariance",
        "entropic_order",
        "lr_drop",
    ];

    /// Default parameters for a kind name.
    pub fn default_for(kind: &str) -> Result<Self> {
        Ok(match kind {
            "balance" => Self::Balance(Default::default()),
            "neuron_balance" => Self::NeuronBalance(Default::default()),
            "weight_balance" => Self::WeightBalance(Default::default()),
            "wu_alignment" => Self::WuAlignment(Default::default()),
            "polynomial_balance" => Self::PolynomialBalance(Default::default()),
            "closed_form" => Self::ClosedForm(Default::default()),
            "alignment" => Self::Alignment(Default::default()),
            "sharpness_closed_form" => Self::SharpnessClosedForm(Default::default()),
            "eos_sweep" => Self::EosSweep(Default::default()),
            "orbit_scan" => Self::OrbitScan(Default::default()),
            "scale_invariance" => Self::ScaleInvariance(Default::default()),
            "entropic_order" => Self::EntropicOrder(Default::default()),
            "lr_drop" => Self::LrDrop(Default::default()),
            other => {
                return Err(invalid(format!(
                    "unknown experiment kind {other:?}; expected one of {}",
                    Self::KINDS.join(", ")
                )))
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Balance(_) => "balance",
            Self::NeuronBalance(_) => "neuron_balance",
            Self::WeightBalance(_) => "weight_balance",
            Self::WuAlignment(_) => "wu_alignment",
            Self::PolynomialBalance(_) => "polynomial_balance",
            Self::ClosedForm(_) => "closed_form",
            Self::Alignment(_) => "alignment",
            Self::SharpnessClosedForm(_) => "sharpness_closed_form",
            Self::EosSweep(_) => "eos_sweep",
            Self::OrbitScan(_) => "orbit_scan",
            Self::ScaleInvariance(_) => "scale_invariance",
            Self::EntropicOrder(_) => "entropic_order",
            Self::LrDrop(_) => "lr_drop",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Balance(p) => p.seed,
            Self::NeuronBalance(p) => p.seed,
            Self::WeightBalance(p) => p.seed,
            Self::WuAlignment(p) => p.seed,
            Self::PolynomialBalance(p) => p.seed,
            Self::ClosedForm(p) => p.seed,
            Self::Alignment(p) => p.seed,
            Self::SharpnessClosedForm(p) => p.seed,
            Self::EosSweep(p) => p.seed,
            Self::OrbitScan(p) => p.seed,
            Self::ScaleInvariance(p) => p.seed,
            Self::EntropicOrder(_) => 0,
            Self::LrDrop(p) => p.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::Balance(p) => p.seed = seed,
            Self::NeuronBalance(p) => p.seed = seed,
            Self::WeightBalance(p) => p.seed = seed,
            Self::WuAlignment(p) => p.seed = seed,
            Self::PolynomialBalance(p) => p.seed = seed,
            Self::ClosedForm(p) => p.seed = seed,
            Self::Alignment(p) => p.seed = seed,
            Self::SharpnessClosedForm(p) => p.seed = seed,
            Self::EosSweep(p) => p.seed = seed,
            Self::OrbitScan(p) => p.seed = seed,
            Self::ScaleInvariance(p) => p.seed = seed,
            // Deterministic: nothing is sampled.
            Self::EntropicOrder(_) => {}
            Self::LrDrop(p) => p.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Balance(p) => p.validate(),
            Self::NeuronBalance(p) => p.validate(),
            Self::WeightBalance(p) => p.validate(),
            Self::WuAlignment(p) => p.validate(),
            Self::PolynomialBalance(p) => p.validate(),
            Self::ClosedForm(p) => p.validate(),
            Self::Alignment(p) => p.validate(),
            Self::SharpnessClosedForm(p) => p.validate(),
            Self::EosSweep(p) => p.validate(),
            Self::OrbitScan(p) => p.validate(),
            Self::ScaleInvariance(p) => p.validate(),
            Self::EntropicOrder(p) => p.validate(),
            Self::LrDrop(p) => p.validate(),
        }
    }

    /// Runs the recipe without touching the filesystem.
    pub fn run(&self) -> Result<Outcome> {
        self.validate()?;
        match self {
            Self::Balance(p) => layer_balance(p),
            Self::NeuronBalance(p) => neuron_balance(p),
            Self::WeightBalance(p) => weight_balance(p),
            Self::WuAlignment(p) => wu_alignment(p),
            Self::PolynomialBalance(p) => polynomial_balance(p),
            Self::ClosedForm(p) => closed_form(p),
            Self::Alignment(p) => alignment(p),
            Self::SharpnessClosedForm(p) => sharpness_closed_form(p),
            Self::EosSweep(p) => eos_sweep(p),
            Self::OrbitScan(p) => orbit_scan(p),
            Self::ScaleInvariance(p) => scale_invariance(p),
            Self::EntropicOrder(p) => entropic_order(p),
            Self::LrDrop(p) => lr_drop(p),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A kind, its parameters and where to write the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub params: ExperimentParams,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn new(params: ExperimentParams, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            params,
            out_dir: out_dir.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.params.validate()?;
        Ok(spec)
    }

    pub fn csv_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.csv", self.params.kind()))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_summary.json", self.params.kind()))
    }
}

/// The JSON summary written next to the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub spec: ExperimentSpec,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub summary: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub library_version: String,
    pub wall_time_secs: f64,
}

/// Runs the experiment and writes `<kind>.csv` and `<kind>_summary.json`
/// under the spec's output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Summary> {
    spec.params.validate()?;
    let start = Instant::now();
    let outcome = spec.params.run()?;
    std::fs::create_dir_all(&spec.out_dir)?;
    write_rows_csv(&spec.csv_path(), &outcome.rows)?;
    let summary = Summary {
        spec: spec.clone(),
        passed: outcome.passed(),
        checks: outcome.checks,
        summary: outcome.summary,
        notes: outcome.notes,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    std::fs::write(spec.summary_path(), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Writes `series,x,metric,value` rows.
pub fn write_rows_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Mean of the last `frac` of `xs` (at least one element).
pub(crate) fn tail_mean(xs: &[f64], frac: f64) -> f64 {
    let n = ((xs.len() as f64 * frac).ceil() as usize).clamp(1, xs.len().max(1));
    crate::stats::mean(&xs[xs.len() - n..])
}

pub(crate) fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(invalid(msg.to_string()))
    }
}
