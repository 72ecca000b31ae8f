use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvarnav::audit::{run_audit, AuditReport, AuditSpec};
use cvarnav::bench::{run_benchmark, write_episodes, write_summary_csv, BenchReport, SweepSpec};
use cvarnav::config;
use cvarnav::sim::{run_episode, ScenarioConfig};
use cvarnav::Error;

#[derive(Parser)]
#[command(
    name = "cvarnav",
    version,
    about = "CVaR barrier-function crowd navigation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its trace.
    Run(Common),
    /// Run a benchmark sweep and write the summary table.
    Bench(Common),
    /// Run an obstacle-count × noise grid and print success rates.
    Sweep(Common),
    /// Cross-check the filter against the brute-force oracle.
    Audit(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set sigma=0.15` or `--set filter.gamma=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for episode sweeps.
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Config(Error),
    Runtime(Error),
    Audit,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Invariant { .. } | Error::InvalidRiskLevel(_) | Error::Json(_) => {
                Failure::Config(e)
            }
            other => Failure::Runtime(other),
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
    File::create(dir.join(name))
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(e.into()))
}

fn runtime<T>(r: cvarnav::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn cmd_run(args: &Common) -> Result<(), Failure> {
    let cfg: ScenarioConfig = config::load(&args.config, &args.overrides)?;
    let result = run_episode(&cfg)?;
    runtime(result.write_trace(create(&args.out, "trace.jsonl")?))?;
    let s = &result.summary;
    println!(
        "outcome={:?} steps={} length={:.3} time={:.1} min_separation={}",
        s.outcome,
        s.steps,
        s.trajectory_length,
        s.elapsed,
        s.min_separation.map_or("none".into(), |d| format!("{d:.3}"))
    );
    Ok(())
}

fn write_report(report: &BenchReport, out: &Path, summary_name: &str) -> Result<(), Failure> {
    runtime(write_summary_csv(&report.rows, create(out, summary_name)?))?;
    runtime(write_episodes(&report.episodes, create(out, "episodes.jsonl")?))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3}"))
}

fn cmd_bench(args: &Common) -> Result<(), Failure> {
    let spec: SweepSpec = config::load(&args.config, &args.overrides)?;
    let report = run_benchmark(&spec, args.jobs)?;
    write_report(&report, &args.out, "summary.csv")?;
    println!(
        "{:<22} {:>3} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8}",
        "method", "n", "sigma", "SR", "FR", "CR", "ATL", "ATT"
    );
    for r in &report.rows {
        let m = &r.metrics;
        println!(
            "{:<22} {:>3} {:>6} {:>6.3} {:>6.3} {:>6.3} {:>8} {:>8}",
            r.method.label(),
            r.n_obstacles,
            r.sigma,
            m.sr,
            m.fr,
            m.cr,
            fmt_opt(m.atl),
            fmt_opt(m.att)
        );
    }
    Ok(())
}

fn cmd_sweep(args: &Common) -> Result<(), Failure> {
    let spec: SweepSpec = config::load(&args.config, &args.overrides)?;
    let report = run_benchmark(&spec, args.jobs)?;
    write_report(&report, &args.out, "sweep.csv")?;
    for method in &spec.methods {
        println!("SR {}", method.label());
        let header: Vec<String> = spec.sigmas.iter().map(|s| format!("{s:>7}")).collect();
        println!("{:>5} {}", "n\\σ", header.join(" "));
        for &n in &spec.obstacle_counts {
            let cells: Vec<String> = spec
                .sigmas
                .iter()
                .map(|&s| {
                    report
                        .row(method, n, s)
                        .map_or("-".into(), |r| format!("{:>7.3}", r.metrics.sr))
                })
                .collect();
            println!("{n:>5} {}", cells.join(" "));
        }
    }
    Ok(())
}

fn print_audit(report: &AuditReport) {
    let a = &report.agreement;
    println!(
        "agreement: {}/{} matching verdicts ({:.3}, required {:.3}); solver-only {}, oracle-only {}, objective failures {}, verification failures {} -> {}",
        a.matches,
        a.scenes,
        a.agreement(),
        report.min_agreement,
        a.solver_only,
        a.oracle_only,
        a.objective_failures,
        a.verification_failures,
        if report.agreement_passed() { "pass" } else { "FAIL" }
    );
    let m = &report.minimality;
    println!(
        "minimality: {} scenes; not feasible {}, not minimal {}, missed {}, above bound {} -> {}",
        m.scenes,
        m.not_feasible,
        m.not_minimal,
        m.missed,
        m.above_bound,
        if report.minimality_passed() { "pass" } else { "FAIL" }
    );
}

fn cmd_audit(args: &Common) -> Result<(), Failure> {
    let spec: AuditSpec = config::load(&args.config, &args.overrides)?;
    let report = run_audit(&spec)?;
    print_audit(&report);
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(args.out.join("audit.json"), text).map_err(|e| Failure::Runtime(e.into()))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Audit)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Audit(a) => cmd_audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Audit) => ExitCode::from(1),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
    }
}
