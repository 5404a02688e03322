use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bci::distributed::{self, DistOptions, Schedule};
use bci::numfmt::fixed4;
use bci::sim::{self, SimConfig};
use bci::{
    fixed_point_residual, max_bci, min_bci, solve, sweep_alpha, verify_uniform_solution, BciParams,
    LedgerFormat, ShareMatrix, SolveResult, Stopping, UniformCheck,
};

#[derive(Parser)]
#[command(
    name = "bci",
    version,
    about = "Biased contribution index solver and simulators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    DenseCsv,
    SparseJson,
}

#[derive(Clone, Copy, ValueEnum)]
enum StoppingArg {
    /// Stop when successive iterates agree to four decimals.
    FourDp,
    /// Stop when the ∞-norm step drops below --eps.
    InfNorm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    RoundRobin,
    Random,
}

#[derive(clap::Args)]
struct MatrixArgs {
    /// Share matrix file (dense CSV, or sparse JSON when the name ends in .json).
    matrix: PathBuf,
    /// Override the input format instead of guessing from the extension.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(clap::Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "four-dp")]
    stopping: StoppingArg,
    /// Tolerance for --stopping inf-norm.
    #[arg(long, default_value_t = 1e-10, value_parser = parse_positive)]
    eps: f64,
    #[arg(long = "max-iter", default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: u64,
}

impl SolverArgs {
    fn stopping(&self) -> Stopping {
        match self.stopping {
            StoppingArg::FourDp => Stopping::FourDecimalEquality,
            StoppingArg::InfNorm => Stopping::InfNormTol(self.eps),
        }
    }

    fn params(&self, alpha: f64) -> Result<BciParams> {
        Ok(BciParams::new(alpha)?
            .with_stopping(self.stopping())
            .with_max_iterations(self.max_iter as usize))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the index vector and print every iterate.
    Solve {
        #[command(flatten)]
        input: MatrixArgs,
        #[arg(long, default_value_t = 0.8, value_parser = parse_alpha)]
        alpha: f64,
        #[command(flatten)]
        solver: SolverArgs,
        /// Write the full-precision result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iteration counts for a list of alpha values, as CSV.
    Sweep {
        #[command(flatten)]
        input: MatrixArgs,
        /// Comma-separated alpha values, e.g. 0.9,0.8,0.7
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',', value_parser = parse_alpha)]
        alphas: Vec<f64>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the bounds, fixed-point and uniform/balance properties of a solution.
    Verify {
        #[command(flatten)]
        input: MatrixArgs,
        #[arg(long, default_value_t = 0.8, value_parser = parse_alpha)]
        alpha: f64,
        /// Tolerance for the uniform/balance check.
        #[arg(long, default_value_t = 1e-9, value_parser = parse_positive)]
        tol: f64,
    },
    /// Run an admission-control scenario from a JSON config.
    Simulate {
        config: PathBuf,
        /// Metrics JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-recompute CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compute the index with simulated index managers.
    Distributed {
        #[command(flatten)]
        input: MatrixArgs,
        #[arg(long, default_value_t = 0.8, value_parser = parse_alpha)]
        alpha: f64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        replication: u64,
        #[arg(long, value_enum, default_value = "round-robin")]
        schedule: ScheduleArg,
        /// Seed for manager assignment and random schedules.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Message latency in ticks.
        #[arg(long, default_value_t = 0)]
        delay: u64,
        /// Managers stop once no value moves by this much in a sweep.
        #[arg(long, default_value_t = 1e-10, value_parser = parse_positive)]
        eps: f64,
        #[arg(long = "max-iter", default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
        max_iter: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Message trace CSV output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("alpha must lie in (0, 1), got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("BCI_SEED") {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .with_context(|| format!("BCI_SEED=`{s}` is not an integer"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn load_matrix(args: &MatrixArgs) -> Result<ShareMatrix> {
    let format = match args.format {
        Some(FormatArg::DenseCsv) => LedgerFormat::DenseCsv,
        Some(FormatArg::SparseJson) => LedgerFormat::SparseJson,
        None => LedgerFormat::from_path(&args.matrix),
    };
    ShareMatrix::load_file(&args.matrix, format).with_context(|| format!("reading {}", args.matrix.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_history(out: &mut impl Write, result: &SolveResult) -> Result<()> {
    let n = result.x.len();
    write!(out, "{:<8}", "i")?;
    for i in 1..=n {
        write!(out, "{:>9}", i)?;
    }
    writeln!(out)?;
    for (k, row) in result.history.iter().enumerate() {
        write!(out, "{:<8}", format!("x^{k}"))?;
        for &v in row.values() {
            write!(out, "{:>9}", fixed4(v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn print_warnings(out: &mut impl Write, result: &SolveResult) -> Result<()> {
    for w in &result.warnings {
        writeln!(out, "warning: {w:?}")?;
    }
    Ok(())
}

fn cmd_solve(input: &MatrixArgs, alpha: f64, solver: &SolverArgs, out: Option<&Path>) -> Result<bool> {
    let ledger = load_matrix(input)?;
    let result = solve(&ledger, &solver.params(alpha)?)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "alpha: {alpha}")?;
    print_history(&mut stdout, &result)?;
    print_warnings(&mut stdout, &result)?;
    writeln!(stdout, "iterations: {}", result.iterations)?;
    if let Some(path) = out {
        write_file(path, format!("{}\n", result.to_json()).as_bytes())?;
    }
    Ok(true)
}

fn cmd_sweep(input: &MatrixArgs, alphas: &[f64], solver: &SolverArgs, out: Option<&Path>) -> Result<bool> {
    let ledger = load_matrix(input)?;
    let points = sweep_alpha(&ledger, alphas, solver.stopping(), solver.max_iter as usize)?;
    let mut csv = String::from("alpha,iterations\n");
    for p in &points {
        csv.push_str(&format!("{},{}\n", p.alpha, p.iterations));
    }
    print!("{csv}");
    if let Some(path) = out {
        write_file(path, csv.as_bytes())?;
    }
    Ok(true)
}

fn cmd_verify(input: &MatrixArgs, alpha: f64, tol: f64) -> Result<bool> {
    let ledger = load_matrix(input)?;
    let params = BciParams::new(alpha)?.with_stopping(Stopping::InfNormTol(1e-12));
    let result = solve(&ledger, &params)?;
    let lo = min_bci(alpha)?;
    let hi = max_bci();
    let mut all_ok = true;

    let in_bounds = result
        .history
        .iter()
        .all(|x| x.values().iter().all(|&v| v >= lo && v <= hi));
    all_ok &= in_bounds;
    println!(
        "bounds           {}  every iterate in [{}, {}]",
        pass(in_bounds),
        fixed4(lo),
        fixed4(hi)
    );

    let residual = fixed_point_residual(&ledger, &result.x, alpha)?;
    let final_step = result.final_residual();
    let fp_ok = residual <= 2.0 * final_step;
    all_ok &= fp_ok;
    println!(
        "fixed-point      {}  |x - phi(x)| = {:e}, last step = {:e}",
        pass(fp_ok),
        residual,
        final_step
    );

    let balanced = ledger.is_balanced(tol * ledger.summary().total / ledger.n() as f64);
    match verify_uniform_solution(&ledger, alpha, tol)? {
        UniformCheck::UniformAndBalanced => {
            println!(
                "uniform/balance  PASS  x = {} * e and every peer is balanced",
                1.0 - alpha / 2.0
            );
        }
        UniformCheck::UniformOnly { peer, violation } => {
            all_ok = false;
            println!("uniform/balance  FAIL  uniform solution but peer {peer} is off balance by {violation}");
        }
        UniformCheck::NotUniform { max_deviation } => {
            // a balanced ledger must have produced the uniform solution
            all_ok &= !balanced;
            let status = if balanced { "FAIL" } else { "NOT-APPLICABLE" };
            println!(
                "uniform/balance  {status}  (NotUniform, max deviation {})",
                fixed4(max_deviation)
            );
        }
    }
    print_warnings(&mut std::io::stdout().lock(), &result)?;
    Ok(all_ok)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_simulate(config_path: &Path, out: Option<&Path>, csv: Option<&Path>) -> Result<bool> {
    let text =
        fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let mut config: SimConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    if let Some(seed) = env_seed()? {
        config.rng_seed = seed;
    }
    let run = sim::run_simulation(&config)?;
    let report = sim::fairness_report(&run.metrics, &run.ledger, config.alpha)?;
    let m = &run.metrics;

    println!(
        "peers: {}  attempts: {}  seed: {}",
        config.n, config.duration, config.rng_seed
    );
    println!("committed: {}  denied: {}", m.committed_total, m.denied_total);
    println!(
        "{:<6}{:<18}{:>12}{:>12}{:>9}{:>10}",
        "peer", "profile", "uploaded", "downloaded", "denied", "bci"
    );
    for (i, p) in m.peers.iter().enumerate() {
        let profile = match p.profile {
            Some(sim::PeerProfile::Cooperative { .. }) => "cooperative",
            Some(sim::PeerProfile::FreeRider) => "free-rider",
            Some(sim::PeerProfile::PureContributor) => "pure-contributor",
            None => "-",
        };
        println!(
            "{:<6}{:<18}{:>12}{:>12}{:>9}{:>10}",
            i,
            profile,
            p.uploaded_total,
            p.downloaded_total,
            p.denied_downloads,
            fixed4(report.final_bci.values()[i])
        );
    }
    println!(
        "free-rider download fraction: {}",
        fixed4(m.free_rider_download_fraction)
    );
    let after: u64 = m
        .peers
        .iter()
        .filter(|p| p.profile == Some(sim::PeerProfile::FreeRider))
        .map(|p| p.downloads_after_rating)
        .sum();
    println!("free-rider downloads after first rating: {after}");
    println!(
        "mean imbalance: {}  max imbalance: {}",
        fixed4(report.mean_imbalance),
        fixed4(report.max_imbalance)
    );
    println!(
        "bci dispersion: {}  correlation with net upload: {:?}",
        fixed4(report.bci_dispersion),
        report.correlation_direction
    );

    if let Some(path) = out {
        write_file(path, format!("{}\n", m.to_json()).as_bytes())?;
    }
    if let Some(path) = csv {
        let mut buf = Vec::new();
        m.write_trajectory_csv(&mut buf)?;
        write_file(path, &buf)?;
    }
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn cmd_distributed(
    input: &MatrixArgs,
    alpha: f64,
    replication: u64,
    schedule: ScheduleArg,
    seed: u64,
    delay: u64,
    eps: f64,
    max_iter: u64,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<bool> {
    let ledger = load_matrix(input)?;
    let seed = env_seed()?.unwrap_or(seed);
    let params = BciParams::new(alpha)?
        .with_stopping(Stopping::InfNormTol(eps))
        .with_max_iterations(max_iter as usize);
    let assignment = distributed::assign_managers(ledger.n(), replication as usize, seed)?;
    let options = DistOptions {
        schedule: match schedule {
            ScheduleArg::RoundRobin => Schedule::RoundRobin,
            ScheduleArg::Random => Schedule::RandomOrder(seed),
        },
        delay_ticks: delay,
        record_trace: trace.is_some(),
        ..DistOptions::default()
    };
    let (report, messages) = distributed::run_distributed_with(&ledger, &params, &assignment, &options)?;

    println!(
        "rounds: {}  converged: {}  final tick: {}",
        report.rounds, report.converged, report.final_tick
    );
    println!("messages: {}", report.messages_total);
    for (kind, count) in &report.messages_by_kind {
        println!("  {kind}: {count}");
    }
    println!(
        "votes: {} agreed, {} majority, {} no majority",
        report.votes.agreed, report.votes.majority, report.votes.no_majority
    );
    let row: Vec<String> = report.x.values().iter().map(|&v| fixed4(v)).collect();
    println!("x: {}", row.join(" "));
    println!(
        "divergence from centralized: {:e}",
        report.divergence_from_centralized
    );

    if let Some(path) = out {
        write_file(path, format!("{}\n", report.to_json()).as_bytes())?;
    }
    if let Some(path) = trace {
        let mut buf = Vec::new();
        distributed::write_trace_csv(&mut buf, &messages)?;
        write_file(path, &buf)?;
    }
    Ok(report.converged)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Solve {
            input,
            alpha,
            solver,
            out,
        } => cmd_solve(input, *alpha, solver, out.as_deref()),
        Command::Sweep {
            input,
            alphas,
            solver,
            out,
        } => cmd_sweep(input, alphas, solver, out.as_deref()),
        Command::Verify { input, alpha, tol } => cmd_verify(input, *alpha, *tol),
        Command::Simulate { config, out, csv } => cmd_simulate(config, out.as_deref(), csv.as_deref()),
        Command::Distributed {
            input,
            alpha,
            replication,
            schedule,
            seed,
            delay,
            eps,
            max_iter,
            out,
            trace,
        } => cmd_distributed(
            input,
            *alpha,
            *replication,
            *schedule,
            *seed,
            *delay,
            *eps,
            *max_iter,
            out.as_deref(),
            trace.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        // output piped into something like `head` that stopped reading
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
