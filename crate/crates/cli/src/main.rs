use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use entrolab::experiments::{run_experiment, ExperimentParams, ExperimentSpec, Summary};
use entrolab::numerics::gaussian_matrix;
use entrolab::trainer::{train_to_dir, TrainConfig};
use entrolab::{Architecture, DataModel, Matrix, Network, Rng};

#[derive(Parser)]
#[command(name = "entrolab", version, about = "Entropic-loss experiments for SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write its trajectory, manifest and checkpoint.
    Train(Common),
    /// Gradient balance laws (layer, neuron, weight, WU products, polynomial nets).
    Balance {
        #[arg(long, value_enum, default_value_t = BalanceLaw::Layer)]
        law: BalanceLaw,
        #[command(flatten)]
        common: Common,
    },
    /// Representation alignment of independently trained deep linear nets.
    Align(Common),
    /// Learning rate by noise-balance grid of the edge of stability.
    EosSweep(Common),
    /// Order of the entropic correction on a scalar model.
    VerifyEntropic(Common),
    /// Closed-form deep linear solutions and their consistency checks.
    ClosedForm(Common),
    /// Sharpness at the entropic optimum, or flattening of a scale-invariant model.
    Sharpness {
        #[arg(long)]
        scale_invariant: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sharpness and free energy along symmetry orbits.
    OrbitScan(Common),
    /// Entropy response to a learning-rate drop.
    LrDrop(Common),
    /// Summarise every `*_summary.json` under a directory.
    Report {
        /// Directory holding the summaries.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config: an experiment spec (`kind`, `params`, `out_dir`), or a
    /// training job for `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Format of the verdict printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceLaw {
    Layer,
    Neuron,
    Weight,
    Wu,
    Polynomial,
}

impl BalanceLaw {
    fn kind(self) -> &'static str {
        match self {
            Self::Layer => "balance",
            Self::Neuron => "neuron_balance",
            Self::Weight => "weight_balance",
            Self::Wu => "wu_alignment",
            Self::Polynomial => "polynomial_balance",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// A single teacher-student training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainJob {
    architecture: Architecture,
    dims: Vec<usize>,
    init_scale: f64,
    /// When set, targets come from a random network of the same shape with
    /// this weight scale; otherwise from a random linear map.
    teacher_scale: Option<f64>,
    input_scale: f64,
    noise: f64,
    out_dir: PathBuf,
    train: TrainConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        let mut train = TrainConfig::new(entrolab::entropic::EntropicConfig::new(0.05, 0.0, 32), 10_000, 500, 1);
        train.metrics.sharpness_every = 0;
        Self {
            architecture: Architecture::DeepLinear,
            dims: vec![4, 8, 4],
            init_scale: 0.5,
            teacher_scale: None,
            input_scale: 1.0,
            noise: 0.1,
            out_dir: PathBuf::from("out"),
            train,
        }
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}

fn experiment_spec(kinds: &[&str], common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => {
            let spec = ExperimentSpec::from_json(&read_config(path)?)
                .with_context(|| format!("parsing config {}", path.display()))?;
            if !kinds.contains(&spec.params.kind()) {
                bail!("config kind {:?} does not belong to this command (expected {})", spec.params.kind(), kinds.join(" or "));
            }
            spec
        }
        None => ExperimentSpec::new(ExperimentParams::default_for(kinds[0])?, "out"),
    };
    if let Some(seed) = common.seed {
        spec.params.set_seed(seed);
    }
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    if let Some(n) = common.parallelism {
        match &mut spec.params {
            ExperimentParams::EosSweep(p) => p.parallelism = n,
            _ => eprintln!("note: --parallelism only affects eos-sweep"),
        }
    }
    spec.params.validate()?;
    Ok(spec)
}

fn print_summary(summary: &Summary, format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(summary)?),
        Format::Csv => {
            println!("kind,criterion,check,value,bound,passed");
            for c in &summary.checks {
                println!("{},{},\"{}\",{},\"{}\",{}", summary.spec.params.kind(), c.criterion, c.name, c.value, c.bound, c.passed);
            }
        }
    }
    Ok(())
}

fn run_kind(kinds: &[&str], common: &Common) -> Result<bool> {
    let spec = experiment_spec(kinds, common)?;
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&spec)?);
        return Ok(true);
    }
    let summary = run_experiment(&spec)?;
    print_summary(&summary, common.format)?;
    eprintln!(
        "wrote {} and {} ({:.1} s)",
        spec.csv_path().display(),
        spec.summary_path().display(),
        summary.wall_time_secs
    );
    Ok(summary.passed)
}

fn run_train(common: &Common) -> Result<bool> {
    let mut job: TrainJob = match &common.config {
        Some(path) => serde_json::from_str(&read_config(path)?).with_context(|| format!("parsing config {}", path.display()))?,
        None => TrainJob::default(),
    };
    if let Some(seed) = common.seed {
        job.train.seed = seed;
    }
    if let Some(out) = &common.out {
        job.out_dir = out.clone();
    }
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&job)?);
        return Ok(true);
    }
    if job.dims.len() < 2 {
        bail!("dims needs at least an input and an output width");
    }
    let (dx, dy) = (job.dims[0], *job.dims.last().unwrap());
    let mut rng = Rng::new(job.train.seed).child(100);
    let sigma_x = Matrix::identity(dx).scale(job.input_scale);
    let sigma_eps = Matrix::identity(dy).scale(job.noise);
    let dm = match job.teacher_scale {
        Some(scale) => {
            let teacher = Network::random(job.architecture, &job.dims, &mut rng, scale)?;
            DataModel::new(Matrix::zeros(dy, dx), sigma_x, sigma_eps)?.with_teacher(teacher)?
        }
        None => DataModel::new(gaussian_matrix(&mut rng, dy, dx, None)?, sigma_x, sigma_eps)?,
    };
    let net = Network::random(job.architecture, &job.dims, &mut rng, job.init_scale)?;
    let run = train_to_dir(&net, &dm, &job.train, &job.out_dir)?;
    let last = run.last();
    match common.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(last)?),
        Format::Csv => {
            println!("step,loss,entropy,diverged");
            println!("{},{},{},{}", last.step, last.loss, last.entropy.value, run.diverged.is_some());
        }
    }
    eprintln!("wrote trajectory, manifest and checkpoint to {}", job.out_dir.display());
    Ok(run.diverged.is_none())
}

fn report(dir: &Path, format: Format) -> Result<bool> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_summary.json")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no *_summary.json files in {}", dir.display());
    }
    let mut summaries = Vec::new();
    for p in &paths {
        let s: Summary = serde_json::from_str(&read_config(p)?).with_context(|| format!("parsing {}", p.display()))?;
        summaries.push(s);
    }
    match format {
        Format::Json => {
            let verdicts: Vec<_> = summaries
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "kind": s.spec.params.kind(),
                        "passed": s.passed,
                        "wall_time_secs": s.wall_time_secs,
                        "checks": s.checks,
                    })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&verdicts)?);
        }
        Format::Csv => {
            println!("kind,passed,checks,failed,wall_time_secs");
            for s in &summaries {
                let failed = s.checks.iter().filter(|c| !c.passed).count();
                println!("{},{},{},{},{:.3}", s.spec.params.kind(), s.passed, s.checks.len(), failed, s.wall_time_secs);
            }
        }
    }
    Ok(summaries.iter().all(|s| s.passed))
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let passed = match &cli.command {
        Command::Train(c) => run_train(c)?,
        Command::Balance { law, common } => run_kind(&[law.kind()], common)?,
        Command::Align(c) => run_kind(&["alignment"], c)?,
        Command::EosSweep(c) => run_kind(&["eos_sweep"], c)?,
        Command::VerifyEntropic(c) => run_kind(&["entropic_order"], c)?,
        Command::ClosedForm(c) => run_kind(&["closed_form"], c)?,
        Command::Sharpness { scale_invariant, common } => {
            let kinds: &[&str] = if *scale_invariant {
                &["scale_invariance", "sharpness_closed_form"]
            } else {
                &["sharpness_closed_form", "scale_invariance"]
            };
            run_kind(kinds, common)?
        }
        Command::OrbitScan(c) => run_kind(&["orbit_scan"], c)?,
        Command::LrDrop(c) => run_kind(&["lr_drop"], c)?,
        Command::Report { out, format } => report(out, *format)?,
    };
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
