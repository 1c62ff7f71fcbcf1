//! `divrisk`: train, verify, report and prepare datasets.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 theory violation.

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use divrisk::data::{self, SslDataset, SplitRole};
use divrisk::divergence::DivergenceSpec;
use divrisk::experiment::{self, ExperimentConfig, Scenario};
use divrisk::report;
use divrisk::selftrain::BetaChoice;
use divrisk::theory::{self, Report, TheoryBudgets};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "divrisk", version, about = "Divergence-based risks and self-training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment config over its seeds.
    Train(TrainArgs),
    /// Run the numerical theory checks.
    Theory(TheoryArgs),
    /// Build a result table from metrics files.
    Report(ReportArgs),
    /// Convert, split and inspect datasets.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Sl,
    DpSsl,
    DemSsl,
    Fsl,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Sl => Scenario::Sl,
            ScenarioArg::DpSsl => Scenario::DpSsl,
            ScenarioArg::DemSsl => Scenario::DemSsl,
            ScenarioArg::Fsl => Scenario::Fsl,
        }
    }
}

/// Overrides apply on top of the config file.
#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "DIVRISK_OUT", default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// kl, tv, chi-squared, power:<p>, js, le-cam, renyi:<alpha>.
    #[arg(long)]
    divergence: Option<DivergenceSpec>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    iterations: Option<usize>,
    /// `auto` or a number in [0, 1].
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    kappa_p: Option<f64>,
    #[arg(long)]
    use_uncertainty: Option<bool>,
    #[arg(long)]
    balance: Option<bool>,
    #[arg(long)]
    pseudo_noise: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = TheoryBudgets::default().trials)]
    trials: usize,
    #[arg(long, default_value_t = TheoryBudgets::default().instances)]
    instances: usize,
    #[arg(long, default_value_t = TheoryBudgets::default().resamples)]
    resamples: usize,
    #[arg(long, default_value_t = TheoryBudgets::default().seed)]
    seed: u64,
    /// Also treat KL as a metric, which must fail.
    #[arg(long)]
    kl_probe: bool,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics JSONL files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Sparse,
    Csv,
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Parse a dataset, split it and write a cache.
    Cache {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "sparse")]
        format: Format,
        /// Feature dimension of sparse input; inferred when absent.
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        labeled: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        stratified: bool,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print split sizes and class counts of a cache.
    Inspect { cache: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Theory(args) => run_theory(args),
        Command::Report(args) => run_report(args),
        Command::Data(cmd) => run_data(cmd),
    }
}

fn apply_overrides(config: &mut ExperimentConfig, a: &TrainArgs) -> Result<()> {
    if let Some(v) = &a.name {
        config.name = v.clone();
    }
    if let Some(v) = a.scenario {
        config.scenario = v.into();
    }
    if let Some(v) = a.divergence {
        config.divergence = v;
    }
    if let Some(v) = &a.seeds {
        config.seeds = v.clone();
    }
    if let Some(v) = a.iterations {
        config.iterations = v;
    }
    if let Some(v) = &a.beta {
        config.beta = match v.as_str() {
            "auto" => BetaChoice::Auto,
            s => BetaChoice::Fixed(s.parse().with_context(|| format!("--beta: `{s}` is neither `auto` nor a number"))?),
        };
    }
    if a.tau_p.is_some() || a.kappa_p.is_some() || a.use_uncertainty.is_some() {
        let t = config.thresholds.get_or_insert_with(Default::default);
        t.tau_p = a.tau_p.unwrap_or(t.tau_p);
        t.kappa_p = a.kappa_p.unwrap_or(t.kappa_p);
        t.use_uncertainty = a.use_uncertainty.unwrap_or(t.use_uncertainty);
    }
    if a.lambda_h.is_some() || a.lambda_u.is_some() {
        let r = config.regularization.get_or_insert_with(Default::default);
        r.lambda_h = a.lambda_h.unwrap_or(r.lambda_h);
        r.lambda_u = a.lambda_u.unwrap_or(r.lambda_u);
    }
    if let Some(v) = a.balance {
        config.balance = v;
    }
    if let Some(v) = a.pseudo_noise {
        config.pseudo_noise = v;
    }
    if let Some(v) = a.epochs {
        config.optimizer.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.optimizer.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.optimizer.batch_size = v;
    }
    config.validate()?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<u8> {
    let mut config = ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    apply_overrides(&mut config, &args)?;
    if args.dry_run {
        print!("{}", config.to_toml());
        return Ok(0);
    }
    eprintln!("{} [{}] {} config {}", config.name, config.column(), config.divergence, &config.hash()[..12]);
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for &seed in &config.seeds {
        let (record, timing) = experiment::run_seed(&config, seed)?;
        eprintln!("  seed {seed}: test accuracy {:.2}% ({:.1}s)", 100.0 * record.final_test_accuracy, timing.wall_time_secs);
        records.push(record);
        timings.push(timing);
    }
    let outcome = experiment::ExperimentOutcome { records, timings };
    let files = experiment::write_outcome(&args.out, &config, &outcome)?;
    println!("{} {}: {}", config.name, config.column(), outcome.summary());
    eprintln!("metrics written to {}", files.metrics.display());
    Ok(0)
}

fn run_theory(args: TheoryArgs) -> Result<u8> {
    let budgets = TheoryBudgets { trials: args.trials, instances: args.instances, resamples: args.resamples, seed: args.seed, ..TheoryBudgets::default() };
    let report = theory::run_theory_suite(&budgets, args.kl_probe)?;
    for line in report.lines() {
        println!("{line}");
    }
    if let Some(path) = &args.json {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report)?;
    }
    Ok(if report.violations() == 0 { 0 } else { EXIT_VIOLATION })
}

fn run_report(args: ReportArgs) -> Result<u8> {
    let mut records = Vec::new();
    for path in &args.inputs {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        records.extend(experiment::read_run_records(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?);
    }
    let table = report::emit_table(&records)?;
    print!("{}", table.to_text());
    if let Some(path) = &args.csv {
        std::fs::write(path, table.to_csv()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn read_dataset(input: &Path, format: Format, dims: Option<usize>) -> Result<data::LabeledData> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let parsed = match format {
        Format::Sparse => data::parse_sparse_dataset(BufReader::new(file), dims),
        Format::Csv => data::parse_dense_csv(file),
    };
    parsed.with_context(|| format!("parsing {}", input.display()))
}

fn run_data(cmd: DataCommand) -> Result<u8> {
    match cmd {
        DataCommand::Cache { input, format, dims, labeled, test, seed, stratified, output } => {
            let parsed = read_dataset(&input, format, dims)?;
            let ds = data::split(&parsed, labeled, test, seed, stratified)?;
            let file = File::create(&output).with_context(|| format!("creating {}", output.display()))?;
            ds.save_cache(BufWriter::new(file))?;
            describe(&ds);
        }
        DataCommand::Inspect { cache } => {
            let file = File::open(&cache).with_context(|| format!("opening {}", cache.display()))?;
            let ds = SslDataset::load_cache(BufReader::new(file))?;
            describe(&ds);
        }
    }
    Ok(0)
}

fn describe(ds: &SslDataset) {
    println!("classes {} dims {}", ds.k(), ds.dim());
    for role in [SplitRole::Labeled, SplitRole::Unlabeled, SplitRole::Test] {
        println!("{role:?}: {} rows", ds.count(role));
    }
    println!("unlabeled class counts {:?}", ds.unlabeled_class_counts());
}
