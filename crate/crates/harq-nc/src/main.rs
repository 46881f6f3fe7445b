//! Command-line front end: scenario validation, single episodes, Monte
//! Carlo sweeps, the scalar DP oracle, and gain-schedule dumps.
//!
//! Exit codes: 0 on success, 2 on parse/validation/unsupported-input
//! problems, 3 on runtime or numerical failures.

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use harq_nc::encoder::DeltaMode;
use harq_nc::model::{load_scenario, validate_scenario, Policy, ScenarioConfig};
use harq_nc::sim::{
    monte_carlo_compare, write_gains_csv, write_summary_csv, write_summary_json, write_trace_csv,
    write_trace_json, FileMeta, Simulator,
};
use harq_nc::{dp_oracle, Error};

const EXIT_VALIDATION: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

#[derive(Parser)]
#[command(
    name = "harq-nc",
    version,
    about = "Networked LQG control over an erasure channel with HARQ retransmission scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario document (JSON). May also be given via --scenario.
    #[arg(value_name = "SCENARIO")]
    scenario_pos: Option<PathBuf>,

    /// Scenario document (JSON), alternative to the positional form.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,

    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the Monte Carlo run count.
    #[arg(long)]
    runs: Option<usize>,

    /// Override the switching policy; montecarlo accepts a comma-separated
    /// list and compares them under common random numbers.
    #[arg(long, value_delimiter = ',', value_name = "NAME[,NAME...]")]
    policy: Option<Vec<String>>,

    /// Write output here instead of stdout.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,

    /// Output format for traces and summaries.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,

    /// Worker threads for Monte Carlo (falls back to HARQ_NC_WORKERS, then
    /// all cores). Results are identical for every worker count.
    #[arg(long)]
    workers: Option<usize>,

    /// Continuation-value residual mode for the optimal policy.
    #[arg(long = "delta-mode", value_name = "zero|exact")]
    delta_mode: Option<String>,
}

#[derive(Args)]
struct DpArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Grid points per axis (mismatch and each innovation slot).
    #[arg(long, default_value_t = 201)]
    grid_points: usize,

    /// Gauss-Hermite nodes for the innovation expectation.
    #[arg(long, default_value_t = 33)]
    quad_points: usize,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Also write per-run objective values as a CSV column file.
    #[arg(long, value_name = "PATH")]
    per_run_output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario document and list every violated invariant.
    Validate(CommonArgs),
    /// Run one seeded episode and emit its step-by-step trace.
    Simulate(CommonArgs),
    /// Estimate the objective over many runs; compare policies pairwise.
    Montecarlo(MonteCarloArgs),
    /// Build the scalar value/decision tables and dump them (CSV only).
    DpOracle(DpArgs),
    /// Dump the Riccati cost-to-go and feedback-gain schedules (CSV only).
    DumpGains(CommonArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Parse(_) | Error::Validation(_) | Error::Unsupported(_) => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Montecarlo(args) => cmd_montecarlo(&args),
        Command::DpOracle(args) => cmd_dp_oracle(&args),
        Command::DumpGains(args) => cmd_dump_gains(&args),
    }
}

fn scenario_path(args: &CommonArgs) -> Result<PathBuf, Error> {
    match (&args.scenario_pos, &args.scenario) {
        (Some(p), None) | (None, Some(p)) => Ok(p.clone()),
        (Some(_), Some(_)) => Err(Error::Parse(
            "give the scenario either positionally or via --scenario, not both".into(),
        )),
        (None, None) => Err(Error::Parse("missing scenario path".into())),
    }
}

fn parse_policies(args: &CommonArgs) -> Result<Option<Vec<Policy>>, Error> {
    match &args.policy {
        None => Ok(None),
        Some(names) => {
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                out.push(Policy::from_str(name).map_err(Error::Parse)?);
            }
            Ok(Some(out))
        }
    }
}

/// Load the scenario and apply the CLI overrides (single-policy commands).
fn load_with_overrides(args: &CommonArgs) -> Result<ScenarioConfig, Error> {
    let mut cfg = load_scenario(scenario_path(args)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = args.runs {
        if runs < 1 {
            return Err(Error::Parse("--runs must be >= 1".into()));
        }
        cfg.runs = runs;
    }
    if let Some(policies) = parse_policies(args)? {
        if policies.len() != 1 {
            return Err(Error::Parse(
                "this subcommand takes exactly one --policy".into(),
            ));
        }
        cfg.policy = policies[0];
    }
    if let Some(mode) = &args.delta_mode {
        let mode = DeltaMode::from_str(mode).map_err(Error::Parse)?;
        cfg.policy = apply_delta_mode(cfg.policy, mode);
    }
    Ok(cfg)
}

fn apply_delta_mode(policy: Policy, mode: DeltaMode) -> Policy {
    match (policy, mode) {
        (Policy::HarqOptimal, DeltaMode::Exact) => Policy::HarqOptimalExactDelta,
        (Policy::HarqOptimalExactDelta, DeltaMode::Zero) => Policy::HarqOptimal,
        (p, _) => p,
    }
}

fn worker_count(args: &CommonArgs) -> Option<usize> {
    args.workers.or_else(|| {
        std::env::var("HARQ_NC_WORKERS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
}

/// Run `f` inside a rayon pool of the requested size (default pool when
/// unspecified). Worker count never changes results, only wall time.
fn with_workers<T>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, Error> + Send,
) -> Result<T, Error>
where
    T: Send,
{
    match workers {
        None => f(),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Unsupported(format!("cannot build worker pool: {e}")))?;
            pool.install(f)
        }
    }
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Error> {
    match path {
        Some(p) => Ok(Box::new(std::io::BufWriter::new(std::fs::File::create(p)?))),
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn cmd_validate(args: &CommonArgs) -> Result<i32, Error> {
    let path = scenario_path(args)?;
    match load_scenario(&path) {
        Ok(cfg) => {
            // Re-run explicitly so the count reflects the validator, not
            // just the loader's accept/reject.
            let violations = validate_scenario(&cfg);
            println!("{} violations", violations.len());
            for v in &violations {
                println!("{v}");
            }
            Ok(if violations.is_empty() {
                0
            } else {
                EXIT_VALIDATION
            })
        }
        Err(Error::Validation(violations)) => {
            println!("{} violations", violations.len());
            for v in &violations {
                println!("{v}");
            }
            Ok(EXIT_VALIDATION)
        }
        Err(other) => Err(other),
    }
}

fn cmd_simulate(args: &CommonArgs) -> Result<i32, Error> {
    let cfg = load_with_overrides(args)?;
    let meta = FileMeta::for_config(&cfg);
    let sim = Simulator::new(&cfg)?;
    let trace = sim.run_episode(0)?;
    let mut out = open_output(&args.output)?;
    match args.format {
        Format::Csv => write_trace_csv(&trace, &meta, &mut out)?,
        Format::Json => write_trace_json(&trace, &meta, &mut out)?,
    }
    out.flush()?;
    Ok(0)
}

fn cmd_montecarlo(args: &MonteCarloArgs) -> Result<i32, Error> {
    let common = &args.common;
    let mut cfg = load_scenario(scenario_path(common)?)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = common.runs {
        if runs < 1 {
            return Err(Error::Parse("--runs must be >= 1".into()));
        }
        cfg.runs = runs;
    }
    let mut policies = parse_policies(common)?.unwrap_or_else(|| vec![cfg.policy]);
    if let Some(mode) = &common.delta_mode {
        let mode = DeltaMode::from_str(mode).map_err(Error::Parse)?;
        for p in &mut policies {
            *p = apply_delta_mode(*p, mode);
        }
    }

    let meta = FileMeta::for_config(&cfg);
    let (mut summaries, pairs) = with_workers(worker_count(common), || {
        monte_carlo_compare(&cfg, &policies)
    })?;

    if let Some(path) = &args.per_run_output {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(meta.csv_header().as_bytes())?;
        let names: Vec<String> = summaries
            .iter()
            .map(|s| format!("upsilon_{}", s.policy))
            .collect();
        writeln!(out, "run_index,{}", names.join(","))?;
        for i in 0..cfg.runs {
            let cols: Vec<String> = summaries
                .iter()
                .map(|s| s.per_run_upsilon[i].to_string())
                .collect();
            writeln!(out, "{i},{}", cols.join(","))?;
        }
        out.flush()?;
    }

    // Per-run columns stay out of the summary document; they live in the
    // dedicated column file requested above.
    for s in &mut summaries {
        s.per_run_upsilon.clear();
    }

    let mut out = open_output(&common.output)?;
    match common.format {
        Format::Csv => write_summary_csv(&summaries, &pairs, &meta, &mut out)?,
        Format::Json => write_summary_json(&summaries, &pairs, &meta, &mut out)?,
    }
    out.flush()?;
    Ok(0)
}

fn cmd_dp_oracle(args: &DpArgs) -> Result<i32, Error> {
    let cfg = load_with_overrides(&args.common)?;
    if !cfg.is_scalar() {
        return Err(Error::Unsupported(format!(
            "dp-oracle supports scalar scenarios only (n = p = 1); \
             this scenario has n={}, p={}",
            cfg.state_dim(),
            cfg.output_dim()
        )));
    }
    let dp_cfg = dp_oracle::DpConfig {
        e_points: args.grid_points,
        nu_points: args.grid_points,
        quad_points: args.quad_points,
        ..dp_oracle::DpConfig::default()
    };
    let tables = with_workers(worker_count(&args.common), || {
        dp_oracle::build_tables(&cfg, dp_cfg)
    })?;

    let meta = FileMeta::for_config(&cfg);
    let mut out = open_output(&args.common.output)?;
    out.write_all(meta.csv_header().as_bytes())?;
    dp_oracle::write_tables_csv(&tables, &mut out)?;
    out.flush()?;

    let (agree, total) = dp_oracle::lookahead_agreement(&tables, &cfg.channel, 200, cfg.seed);
    if total > 0 {
        eprintln!(
            "one-step lookahead agrees with the exact rule on {agree}/{total} \
             on-path decisions ({:.1}%)",
            100.0 * agree as f64 / total as f64
        );
    }
    Ok(0)
}

fn cmd_dump_gains(args: &CommonArgs) -> Result<i32, Error> {
    let cfg = load_with_overrides(args)?;
    let sim = Simulator::new(&cfg)?;
    let meta = FileMeta::for_config(&cfg);
    let mut out = open_output(&args.output)?;
    write_gains_csv(sim.gains(), &cfg, &meta, &mut out)?;
    out.flush()?;
    Ok(0)
}
