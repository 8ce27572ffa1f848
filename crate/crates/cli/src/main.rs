use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cilicia::config::{DatasetFiles, ExperimentConfig, Regime};
use cilicia::data::{generate_synthetic, load_labels, SynthSpec};
use cilicia::experiment::{compare_on, describe_split, emit_comparison, load_source, Comparison};
use cilicia::nn::gradcheck::run_suite;
use cilicia::trainer::StrongHeads;
use cilicia::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "cilicia", version, about = "Correlation-grouped curriculum learning for multi-task attribute classifiers")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the total-dependency vector and the strongly/weakly groups of a label file
    Split { labels: PathBuf },
    /// Generate a synthetic planted-cluster dataset
    Synth(SynthArgs),
    /// Run one regime over all seeds
    Train(RunArgs),
    /// Run several regimes over all seeds and write a joint table
    Compare(RunArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrongArg {
    Frozen,
    Trainable,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature file then label file
    #[arg(long, num_args = 2, value_names = ["FEATURES", "LABELS"])]
    dataset: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "cilicia-out")]
    out: PathBuf,
    /// Comma-separated seed list
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Regime name; repeat or comma-separate for `compare`
    #[arg(long, value_delimiter = ',')]
    regime: Option<Vec<String>>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Epochs for each phase
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    shared_adapter: Option<Switch>,
    #[arg(long, value_enum)]
    strong_heads: Option<StrongArg>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Skip writing phase-1 checkpoints
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Config file whose [synth] section is used
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 6)]
    tasks: usize,
    /// Intra-cluster label correlation of the two clusters
    #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [0.8, 0.2])]
    rho: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn resolve(args: &RunArgs, single: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(paths) = &args.dataset {
        cfg.dataset = Some(DatasetFiles { features: paths[0].clone(), labels: paths[1].clone() });
        cfg.synth = None;
    }
    if let Some(seeds) = &args.seeds {
        cfg.experiment.seeds = seeds.clone();
    }
    if let Some(names) = &args.regime {
        cfg.experiment.regimes = names.iter().map(|n| n.parse()).collect::<Result<Vec<Regime>>>()?;
    }
    if single && cfg.experiment.regimes.len() != 1 {
        return Err(Error::config("train runs exactly one regime; use compare for several"));
    }
    if let Some(l) = args.lambda {
        cfg.transfer.lambda = l;
    }
    if let Some(e) = args.epochs {
        cfg.transfer.epochs_phase1 = e;
        cfg.transfer.epochs_phase2 = e;
    }
    if let Some(s) = args.shared_adapter {
        cfg.model.shared_adapter = matches!(s, Switch::On);
    }
    if let Some(s) = args.strong_heads {
        cfg.transfer.strong_heads_phase2 = match s {
            StrongArg::Frozen => StrongHeads::Frozen,
            StrongArg::Trainable => StrongHeads::Trainable,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn percent(v: Option<f64>) -> String {
    v.map(|x| format!("{:6.2}", 100.0 * x)).unwrap_or_else(|| "     -".into())
}

fn print_summary(cmp: &Comparison) {
    println!("{:<22} {:>8} {:>8} {:>8}", "regime", "strongly", "weakly", "total");
    for r in &cmp.reports {
        let (s, w) = r.groups.as_ref().map_or((None, None), |g| (g.strongly_mean, g.weakly_mean));
        println!("{:<22} {:>8} {:>8} {:>8}", r.regime.name(), percent(s), percent(w), percent(r.total_mean));
        for f in &r.failures {
            eprintln!("{} seed {} failed: {}", r.regime, f.seed, f.message);
        }
    }
}

fn run_typed<F: Scalar>(args: &RunArgs, cfg: &ExperimentConfig) -> Result<i32> {
    let dataset = load_source::<F>(&cfg.source()?)?;
    let checkpoints = (!args.no_checkpoints).then(|| args.out.join("checkpoints"));
    let cmp = compare_on(cfg, &dataset, checkpoints.as_deref())?;
    emit_comparison(&cmp, &args.out)?;
    print_summary(&cmp);
    println!("wrote {}", args.out.display());
    Ok(cmp.reports.iter().flat_map(|r| &r.failures).map(|f| f.exit_code).next().unwrap_or(0))
}

fn run(args: &RunArgs, single: bool) -> Result<i32> {
    let cfg = resolve(args, single)?;
    match args.precision {
        Precision::F64 => run_typed::<f64>(args, &cfg),
        Precision::F32 => run_typed::<f32>(args, &cfg),
    }
}

fn synth(args: &SynthArgs) -> Result<i32> {
    let spec = match &args.config {
        Some(path) => ExperimentConfig::load(path)?
            .synth
            .ok_or_else(|| Error::config(format!("{} has no [synth] section", path.display())))?,
        None => {
            let mut spec = SynthSpec::two_clusters(args.samples, args.tasks, (args.rho[0], args.rho[1]), args.seed);
            spec.label_noise = args.label_noise;
            spec
        }
    };
    let ds = generate_synthetic::<f64>(&spec)?;
    let (features, labels) = ds.write_csv(&args.out)?;
    println!("features: {}", features.display());
    println!("labels:   {}", labels.display());
    println!("digest:   {}", ds.provenance.digest());
    Ok(0)
}

fn split(labels: &Path) -> Result<i32> {
    print!("{}", describe_split(&load_labels(labels)?)?);
    Ok(0)
}

fn gradcheck(args: &GradArgs) -> Result<i32> {
    let suite = run_suite(args.configs, args.seed, args.step)?;
    let worst = suite.max_rel_error();
    println!("configurations: {}", suite.configs);
    for (name, r) in [("head", &suite.head), ("linear", &suite.linear), ("group", &suite.group)] {
        println!("{name:<7} max rel error {:.3e} over {} coordinates ({} kinks skipped)", r.max_rel_error, r.checked, r.skipped_kinks);
    }
    if worst >= GRADCHECK_TOLERANCE {
        return Err(Error::numeric(format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")));
    }
    println!("PASS (max {worst:.3e}, tolerance {GRADCHECK_TOLERANCE:e})");
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Split { labels } => split(labels),
        Command::Synth(a) => synth(a),
        Command::Train(a) => run(a, true),
        Command::Compare(a) => run(a, false),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
