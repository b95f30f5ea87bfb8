//! `structprune`: prune a problem bundle or a layer chain, run the
//! verification suites, or time the solver.
//!
//! Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 verification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use structprune::bench::{run_bench, BenchConfig};
use structprune::builders::DEFAULT_DAMPING;
use structprune::bundle::load_bundle;
use structprune::chain::{load_chain, prune_chain, ChainReport};
use structprune::io::write_matrix_binary;
use structprune::oracle::{run_verify, VerifySizes};
use structprune::search::{prune_problem, PruneReport, REPORT_TOLERANCE};
use structprune::{DeltaSigns, EngineOptions, Error, SchedulePreset, SearchOptions};

#[derive(Parser)]
#[command(name = "structprune", version, about = "Structured pruning by grouped subset selection")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "OSSCAR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune one problem bundle.
    Prune(PruneArgs),
    /// Prune a sequential chain of layers.
    Chain(ChainArgs),
    /// Run the oracle suites.
    Verify(VerifyArgs),
    /// Time the search and single updates.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Schedule: preset string (`nested:t=2`, `non_nested:t=2,extra=30`,
    /// `greedy`), inline JSON, or a JSON file.
    #[arg(long, default_value = "nested")]
    schedule: String,

    /// Relative damping added to H (default 1e-4, or the bundle's own).
    #[arg(long)]
    damping: Option<f64>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Report file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Omit wall-clock fields so reports are reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    problem: PathBuf,

    #[arg(long, conflicts_with = "tau", required_unless_present = "tau")]
    prune_count: Option<usize>,

    /// Fraction of groups to prune, rounded down.
    #[arg(long)]
    tau: Option<f64>,

    /// Pruned weights (binary matrix); defaults to `<out>.weights.bin`.
    #[arg(long)]
    weights_out: Option<PathBuf>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long)]
    chain: PathBuf,

    /// Directory for per-layer pruned weights; defaults to `<out>.weights/`.
    #[arg(long)]
    weights_out: Option<PathBuf>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Fewer instances per suite.
    #[arg(long)]
    quick: bool,

    #[arg(long)]
    out: Option<PathBuf>,

    /// Run the suites against an engine with both update signs reversed.
    #[arg(long, hide = true)]
    fixture_flip_sign: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated `d₁` values for the scaling run.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    quick: bool,

    /// JSON report with all measurements.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Scaling table as CSV (default: stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numerical = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Input(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(0) => Err(Failure::Input(anyhow::anyhow!("--threads must be at least 1"))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli.command)),
            Err(e) => Err(Failure::Input(e.into())),
        },
        None => run(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(4)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Prune(args) => cmd_prune(args),
        Command::Chain(args) => cmd_chain(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn parse_schedule(spec: &str) -> anyhow::Result<SchedulePreset> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return SchedulePreset::from_json(&text).with_context(|| format!("parsing {}", path.display()));
    }
    Ok(spec.parse()?)
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

#[derive(Serialize)]
struct PruneOutput<'a> {
    problem: String,
    damping: f64,
    seed: u64,
    #[serde(flatten)]
    report: &'a PruneReport,
}

fn cmd_prune(args: PruneArgs) -> Result<(), Failure> {
    let schedule = parse_schedule(&args.common.schedule)?;
    let bundle = load_bundle(&args.problem, args.common.damping)?;
    let problem = &bundle.problem;
    let p = problem.group_count();
    let p_prime = match (args.prune_count, args.tau) {
        (Some(n), _) => n,
        (None, Some(tau)) if (0.0..=1.0).contains(&tau) => structprune::chain::prune_count_for(tau, p),
        (None, Some(tau)) => return Err(Failure::Input(anyhow::anyhow!("--tau {tau} is outside [0, 1]"))),
        (None, None) => unreachable!("clap requires one of the two"),
    };
    if p_prime > p {
        return Err(Failure::Input(anyhow::anyhow!("cannot prune {p_prime} groups; the problem has {p}")));
    }
    let mut report = prune_problem(problem, &schedule, p_prime, &SearchOptions::default())?;
    let deviation = report.check_against(problem)?;
    if !(deviation <= REPORT_TOLERANCE) {
        return Err(Error::Drift { what: "objective", deviation }.into());
    }
    if args.common.no_timing {
        report.strip_timing();
    }
    let weights_path = args.weights_out.or_else(|| args.common.out.as_deref().map(|o| sibling(o, ".weights.bin")));
    if let Some(path) = &weights_path {
        let w = report.weights.as_ref().expect("search reports carry weights");
        write_matrix_binary(path, w)?;
    }
    let output = PruneOutput {
        problem: args.problem.display().to_string(),
        damping: bundle.damping,
        seed: args.common.seed,
        report: &report,
    };
    write_json(&output, args.common.out.as_deref())?;
    Ok(())
}

#[derive(Serialize)]
struct ChainOutput<'a> {
    chain: String,
    damping: f64,
    seed: u64,
    #[serde(flatten)]
    report: &'a ChainReport,
}

fn cmd_chain(args: ChainArgs) -> Result<(), Failure> {
    let schedule = parse_schedule(&args.common.schedule)?;
    let damping = args.common.damping.unwrap_or(DEFAULT_DAMPING);
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Failure::Input(anyhow::anyhow!("--damping must be a nonnegative number")));
    }
    let (chain, input) = load_chain(&args.chain)?;
    let mut report = prune_chain(&chain, &input, &schedule, damping, &SearchOptions::default())?;
    if args.common.no_timing {
        report.strip_timing();
    }
    let weights_dir = args.weights_out.or_else(|| args.common.out.as_deref().map(|o| sibling(o, ".weights")));
    if let Some(dir) = &weights_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, w) in report.weights.iter().enumerate() {
            write_matrix_binary(dir.join(format!("layer{i}.bin")), w)?;
        }
    }
    let output = ChainOutput { chain: args.chain.display().to_string(), damping, seed: args.common.seed, report: &report };
    write_json(&output, args.common.out.as_deref())?;
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let sizes = if args.quick { VerifySizes::QUICK } else { VerifySizes::FULL };
    let mut engine = EngineOptions::default();
    if args.fixture_flip_sign {
        engine.signs = DeltaSigns::RESOLVED.flipped();
    }
    let report = run_verify(args.seed, sizes, engine);
    write_json(&report, args.out.as_deref())?;
    if !report.passed() {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
        return Err(Failure::Verification(format!("suites failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let mut config = if args.quick { BenchConfig::quick(args.seed) } else { BenchConfig::full(args.seed) };
    if let Some(sizes) = args.sizes {
        if sizes.is_empty() || sizes.iter().any(|&d| d < 8) {
            return Err(Failure::Input(anyhow::anyhow!("bench sizes must be given and at least 8")));
        }
        config.sizes = sizes;
    }
    // Timings are taken on one thread so they measure the algorithm only.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(anyhow::Error::from)?;
    let report = pool.install(|| run_bench(&config))?;
    let csv = report.scaling_csv();
    match &args.csv {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if let Some(exponent) = report.growth_exponent {
        eprintln!("growth exponent of total time in d1: {exponent:.3}");
    }
    if let Some(out) = &args.out {
        write_json(&report, Some(out))?;
    }
    Ok(())
}
