//! `simpd`: scenario runner and experiment harness for the serving
//! simulator. Subcommands: `run`, `sweep`, `compare`, `fit`, `trace gen`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use simpd_core::controller::{fit_latency_model, LatencyModel};
use simpd_core::error::ConfigError;
use simpd_core::scenario::{
    self, compare, read_controller_csv, run_to_dir, sweep, sweep_goodput, ScenarioConfig,
    SummaryRow,
};
use simpd_core::workload::{generate_trace, write_trace};

#[derive(Parser)]
#[command(name = "simpd", about = "Discrete-event simulator for LLM serving designs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report files.
    Run(RunArgs),
    /// Run a scenario across request rates and report goodput.
    Sweep(SweepArgs),
    /// Run several scenarios at common rates and merge the summaries.
    Compare(CompareArgs),
    /// Fit the TTFT/TPOT latency models from a controller log.
    Fit(FitArgs),
    /// Trace utilities.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    scenario: PathBuf,
    /// Override the workload seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: <scenario-stem>-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    scenario: PathBuf,
    /// Comma-separated request rates, e.g. --rates 2,4,6,8.
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    /// Attainment threshold for the goodput line.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario TOML files (at least one).
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Controller log CSV produced by a dynamic run.
    log: PathBuf,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Generate a trace CSV from a scenario's workload section.
    Gen(TraceGenArgs),
}

#[derive(Args)]
struct TraceGenArgs {
    /// Scenario TOML file with a synthetic workload section.
    scenario: PathBuf,
    /// Output CSV path.
    #[arg(long, required = true)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
}

/// Exit codes: 0 success, 1 validation error, 2 runtime error.
fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Trace(TraceCommand::Gen(a)) => cmd_trace_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation_error(&e) { 1 } else { 2 })
        }
    }
}

fn is_validation_error(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause.is::<ConfigError>()
            || matches!(
                cause.downcast_ref::<simpd_core::scenario::ScenarioError>(),
                Some(simpd_core::scenario::ScenarioError::Config(_))
            )
    })
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::from_file(path)
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.workload.seed = Some(seed);
    }
    Ok(cfg)
}

fn default_out(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scenario".into());
    PathBuf::from(format!("{stem}-out"))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = load_scenario(&a.scenario, a.seed)?;
    let out = a.out.unwrap_or_else(|| default_out(&a.scenario));
    let run = run_to_dir(&cfg, &out)?;
    println!(
        "{}: {} requests, attainment {:.4}, mean e2e {:.4}s",
        run.engine,
        run.report.per_request.len(),
        run.report.attainment,
        run.report.mean_e2e
    );
    if run.trace_resorted {
        eprintln!("warning: trace arrivals were not monotone; rows re-sorted");
    }
    if run.output.audit.unfinished > 0 {
        eprintln!(
            "warning: {} requests did not finish (undersized KV pool?)",
            run.output.audit.unfinished
        );
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:<18} {:>7} {:>10} {:>10} {:>10} {:>10} {:>11} {:>10}",
        "engine", "rate", "p50_ttft", "p90_ttft", "p50_tpot", "p90_tpot", "attainment", "mean_e2e"
    );
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<18} {:>7.3} {:>10} {:>10} {:>10} {:>10} {:>11.4} {:>10.4}",
            r.engine,
            r.rate,
            f(r.ttft.map(|s| s.p50)),
            f(r.ttft.map(|s| s.p90)),
            f(r.tpot.map(|s| s.p50)),
            f(r.tpot.map(|s| s.p90)),
            r.attainment,
            r.mean_e2e
        );
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_scenario(&a.scenario, a.seed)?;
    let runs = sweep(&cfg, &a.rates)?;
    let rows: Vec<SummaryRow> = runs.iter().map(SummaryRow::from_run).collect();
    print_rows(&rows);
    let (goodput, non_monotone) = sweep_goodput(&runs, a.threshold);
    println!("max goodput at attainment >= {}: {goodput}", a.threshold);
    if non_monotone {
        eprintln!("note: attainment was not monotone across the sweep");
    }
    let out = a.out.unwrap_or_else(|| default_out(&a.scenario));
    std::fs::create_dir_all(&out)?;
    scenario::write_summary_csv(out.join("summary.csv"), &rows)?;
    println!("summary written to {}", out.join("summary.csv").display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    if a.scenarios.is_empty() {
        bail!(ConfigError::new("compare", "at least one scenario required"));
    }
    let mut configs = Vec::new();
    for path in &a.scenarios {
        let cfg = load_scenario(path, a.seed)?;
        configs.push((path.display().to_string(), cfg));
    }
    let rows = compare(&configs, &a.rates)?;
    print_rows(&rows);

    // Goodput per engine at the threshold.
    let mut engines: Vec<String> = rows.iter().map(|r| r.engine.clone()).collect();
    engines.sort();
    engines.dedup();
    for engine in &engines {
        let pairs: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.engine == engine)
            .map(|r| (r.rate, r.attainment))
            .collect();
        let (goodput, _) = simpd_core::metrics::max_goodput(&pairs, a.threshold);
        println!("goodput[{engine}] at >= {}: {goodput}", a.threshold);
    }

    let out = a.out.unwrap_or_else(|| PathBuf::from("compare-out"));
    std::fs::create_dir_all(&out)?;
    scenario::write_summary_csv(out.join("summary.csv"), &rows)?;
    write_long_format(&out, &rows)?;
    println!("merged summary written to {}", out.display());
    Ok(())
}

/// Plot-ready long-format files: one CSV per metric with engine,rate,value.
fn write_long_format(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    use std::io::Write as _;
    let metrics: [(&str, Box<dyn Fn(&SummaryRow) -> Option<f64>>); 8] = [
        ("p50_ttft", Box::new(|r| r.ttft.map(|s| s.p50))),
        ("p90_ttft", Box::new(|r| r.ttft.map(|s| s.p90))),
        ("p99_ttft", Box::new(|r| r.ttft.map(|s| s.p99))),
        ("p50_tpot", Box::new(|r| r.tpot.map(|s| s.p50))),
        ("p90_tpot", Box::new(|r| r.tpot.map(|s| s.p90))),
        ("p99_tpot", Box::new(|r| r.tpot.map(|s| s.p99))),
        ("attainment", Box::new(|r| Some(r.attainment))),
        ("mean_e2e", Box::new(|r| Some(r.mean_e2e))),
    ];
    for (name, get) in &metrics {
        let path = dir.join(format!("metric_{name}.csv"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "engine,rate,value")?;
        for r in rows {
            if let Some(v) = get(r) {
                writeln!(w, "{},{:.9},{v:.9}", r.engine, r.rate)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let history = read_controller_csv(&a.log)?;
    if history.is_empty() {
        bail!("controller log {} has no observations", a.log.display());
    }
    let model = fit_latency_model(&history, &LatencyModel::default());
    print_model(&model);
    Ok(())
}

fn print_model(m: &LatencyModel) {
    if m.ttft_fitted {
        println!(
            "ttft(x') = {:.6} / (x' - {:.2}) + {:.6}   (R^2 = {:.4})",
            m.a1, m.lambda, m.b1, m.r2_ttft
        );
    } else {
        println!("ttft side: not enough distinct shares to fit");
    }
    if m.tpot_fitted {
        println!(
            "tpot(y') = {:.6} / y' + {:.6}             (R^2 = {:.4})",
            m.a2, m.b2, m.r2_tpot
        );
    } else {
        println!("tpot side: not enough distinct shares to fit");
    }
    if m.degraded {
        println!("note: a fitted slope was negative and clamped to zero");
    }
}

fn cmd_trace_gen(a: TraceGenArgs) -> Result<()> {
    let mut cfg = load_scenario(&a.scenario, a.seed)?;
    if let Some(rate) = a.rate {
        cfg.workload.rate = Some(rate);
    }
    if let Some(count) = a.count {
        cfg.workload.count = Some(count);
    }
    let params = cfg
        .workload
        .trace_params()?
        .context("trace gen needs a synthetic workload section, not a trace file")?;
    let trace = generate_trace(&params)?;
    write_trace(&a.out, &trace)?;
    println!("{} requests written to {}", trace.len(), a.out.display());
    Ok(())
}
