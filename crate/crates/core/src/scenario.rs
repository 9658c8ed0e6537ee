//! Experiment scenarios: TOML configuration, single runs, rate sweeps,
//! engine comparison, and the report files they emit.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerConfig, ControllerLogRow, Observation};
use crate::cost::{CostParams, ParallelismConfig};
use crate::engine::{Engine, EngineConfig, EngineKind, PoolSizing, SimOutput};
use crate::error::{ConfigError, TraceError};
use crate::metrics::{
    max_goodput, per_request_metrics, LatencySummary, MetricsReport, RequestMetrics, SloConfig,
};
use crate::workload::{
    generate_trace, load_trace, preset, LengthDist, MixtureComponent, Request, TraceParams,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Workload source: either synthetic parameters (a preset name and/or
/// explicit distributions) or a trace CSV path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct WorkloadConfig {
    pub preset: Option<String>,
    pub trace: Option<PathBuf>,
    pub rate: Option<f64>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub input: Option<LengthDist>,
    pub output: Option<LengthDist>,
    pub mixture: Option<Vec<MixtureComponent>>,
    /// Interpret `rate` as requests/second per GPU; the offered rate is
    /// scaled by the GPUs the engine occupies. This matches how the
    /// disaggregated design's doubled hardware is normalized.
    pub rate_per_gpu: bool,
}


impl WorkloadConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let synthetic = self.preset.is_some() || self.input.is_some();
        if self.trace.is_some() && synthetic {
            return Err(ConfigError::new(
                "workload",
                "specify either a trace file or synthetic parameters, not both",
            ));
        }
        if !self.trace.is_some() && !synthetic {
            return Err(ConfigError::new(
                "workload",
                "one workload source required: set `trace`, `preset`, or `input`/`output`",
            ));
        }
        if self.trace.is_none() {
            if self.rate.is_none() {
                return Err(ConfigError::new("workload.rate", "required"));
            }
            if self.count.is_none() {
                return Err(ConfigError::new("workload.count", "required"));
            }
        }
        Ok(())
    }

    /// Materialize the synthetic trace parameters (trace-file workloads
    /// return None).
    pub fn trace_params(&self) -> Result<Option<TraceParams>, ConfigError> {
        if self.trace.is_some() {
            return Ok(None);
        }
        let mut p = match &self.preset {
            Some(name) => preset(name).ok_or_else(|| {
                ConfigError::new(
                    "workload.preset",
                    format!(
                        "unknown preset `{name}` (available: sharegpt-like, longbench-like, heterogeneous)"
                    ),
                )
            })?,
            None => TraceParams {
                rate: 1.0,
                count: 1,
                input: LengthDist::Constant(1),
                output: LengthDist::Constant(1),
                mixture: None,
                seed: 0,
            },
        };
        if let Some(rate) = self.rate {
            p.rate = rate;
        }
        if let Some(count) = self.count {
            p.count = count;
        }
        if let Some(seed) = self.seed {
            p.seed = seed;
        }
        if let Some(input) = &self.input {
            p.input = input.clone();
        }
        if let Some(output) = &self.output {
            p.output = output.clone();
        }
        if self.mixture.is_some() {
            p.mixture = self.mixture.clone();
        }
        p.validate()?;
        Ok(Some(p))
    }
}

fn default_block_size() -> u32 {
    16
}

/// KV pool sizing: either a direct block capacity or derived from GPU
/// memory minus a weight footprint. The derived form charges the weights
/// once per instance, which is how the disaggregated design pays its
/// weight-replica penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    #[serde(default)]
    pub capacity_blocks: Option<u64>,
    #[serde(default)]
    pub gpu_mem_bytes: Option<f64>,
    #[serde(default)]
    pub weight_bytes: Option<f64>,
    /// Disaggregated decode-instance override for storage experiments.
    #[serde(default)]
    pub decode_capacity_blocks: Option<u64>,
}

impl KvConfig {
    pub fn sizing(&self, cost: &CostParams) -> Result<PoolSizing, ConfigError> {
        if self.block_size == 0 {
            return Err(ConfigError::new("kv.block_size", "must be >= 1"));
        }
        let blocks = match (self.capacity_blocks, self.gpu_mem_bytes, self.weight_bytes) {
            (Some(b), None, None) => b,
            (None, Some(mem), Some(weights)) => {
                let free = mem - weights;
                if free <= 0.0 {
                    return Err(ConfigError::new(
                        "kv.gpu_mem_bytes",
                        "weights do not fit in GPU memory",
                    ));
                }
                (free / (cost.kv_bytes_per_token * f64::from(self.block_size))) as u64
            }
            _ => {
                return Err(ConfigError::new(
                    "kv",
                    "set either capacity_blocks or both gpu_mem_bytes and weight_bytes",
                ))
            }
        };
        if blocks == 0 {
            return Err(ConfigError::new("kv", "pool capacity is zero blocks"));
        }
        Ok(PoolSizing {
            block_size: self.block_size,
            blocks,
            decode_blocks: self.decode_capacity_blocks,
        })
    }
}

fn default_trim() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Fraction of completions trimmed from each end of the steady-state
    /// window.
    pub trim_fraction: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            trim_fraction: default_trim(),
        }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default)]
    pub parallelism: ParallelismConfig,
    pub kv: KvConfig,
    pub slo: Option<SloConfig>,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::new("scenario", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| ScenarioError::io(path.display().to_string(), e))?;
        Ok(Self::from_toml_str(&text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.workload.validate()?;
        self.engine.validate()?;
        self.cost.validate()?;
        self.parallelism
            .validate(self.engine.kind == EngineKind::Disaggregated)?;
        self.kv.sizing(&self.cost)?;
        match &self.slo {
            Some(s) => s.validate()?,
            None => {
                return Err(ConfigError::new(
                    "slo",
                    "section required (ttft_s, tpot_s, percentile)",
                ))
            }
        }
        if self.engine.dynamic_partition {
            match &self.controller {
                Some(c) => c.validate()?,
                None => {
                    return Err(ConfigError::new(
                        "controller",
                        "section required when engine.dynamic_partition = true",
                    ))
                }
            }
        } else if let Some(c) = &self.controller {
            c.validate()?;
        }
        Ok(())
    }

    /// Engine label used in summary rows and comparison keys.
    pub fn engine_label(&self) -> String {
        match (self.engine.kind, self.engine.dynamic_partition) {
            (EngineKind::SemiPd, true) => "semi-pd-dynamic".to_string(),
            (kind, _) => kind.as_str().to_string(),
        }
    }

    /// GPUs this engine instance occupies.
    pub fn total_gpus(&self) -> u32 {
        self.cost.gpu_count * self.engine.kind.gpu_multiplier()
    }

    /// Offered request rate after per-GPU normalization.
    pub fn offered_rate(&self, nominal: f64) -> f64 {
        if self.workload.rate_per_gpu {
            nominal * f64::from(self.total_gpus())
        } else {
            nominal
        }
    }
}

/// Outcome of one run: the raw simulation output plus the derived report.
#[derive(Debug)]
pub struct RunResult {
    pub engine: String,
    /// Nominal rate (per-GPU when `rate_per_gpu` is set).
    pub rate: f64,
    pub report: MetricsReport,
    pub output: SimOutput,
    pub trace_resorted: bool,
}

fn build_trace(cfg: &ScenarioConfig, rate_override: Option<f64>) -> Result<(Vec<Request>, f64, bool), ScenarioError> {
    if let Some(path) = &cfg.workload.trace {
        let loaded = load_trace(path)?;
        let nominal = cfg.workload.rate.unwrap_or(0.0);
        return Ok((loaded.requests, nominal, loaded.resorted));
    }
    let mut params = cfg
        .workload
        .trace_params()?
        .expect("synthetic workload validated");
    let nominal = rate_override.unwrap_or(params.rate);
    params.rate = cfg.offered_rate(nominal);
    let trace = generate_trace(&params)?;
    Ok((trace, nominal, false))
}

/// Run one scenario, optionally overriding the nominal rate (used by
/// sweeps).
pub fn run_scenario_at(cfg: &ScenarioConfig, rate_override: Option<f64>) -> Result<RunResult, ScenarioError> {
    cfg.validate()?;
    let (trace, nominal, resorted) = build_trace(cfg, rate_override)?;
    let sizing = cfg.kv.sizing(&cfg.cost)?;
    let slo = cfg.slo.expect("validated");
    let controller = cfg
        .engine
        .dynamic_partition
        .then(|| (slo, cfg.controller.expect("validated")));
    let engine = Engine::new(
        cfg.engine.clone(),
        cfg.cost,
        cfg.parallelism,
        sizing,
        controller,
    )?;
    let output = engine.run(&trace);
    let metrics: Vec<RequestMetrics> = output.records.iter().map(per_request_metrics).collect();
    let report = MetricsReport::from_metrics(
        metrics,
        &slo,
        cfg.metrics.trim_fraction,
        output.pool_high_water.clone(),
    );
    Ok(RunResult {
        engine: cfg.engine_label(),
        rate: nominal,
        report,
        output,
        trace_resorted: resorted,
    })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunResult, ScenarioError> {
    run_scenario_at(cfg, None)
}

/// One row of the summary CSV.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub engine: String,
    pub rate: f64,
    pub ttft: Option<LatencySummary>,
    pub tpot: Option<LatencySummary>,
    pub attainment: f64,
    pub mean_e2e: f64,
}

impl SummaryRow {
    pub fn from_run(run: &RunResult) -> Self {
        Self {
            engine: run.engine.clone(),
            rate: run.rate,
            ttft: run.report.ttft,
            tpot: run.report.tpot,
            attainment: run.report.attainment,
            mean_e2e: run.report.mean_e2e,
        }
    }
}

/// Sweep the scenario over nominal rates. Runs execute in parallel; each
/// run is internally single-threaded and seed-deterministic, and rows come
/// back sorted by rate.
pub fn sweep(cfg: &ScenarioConfig, rates: &[f64]) -> Result<Vec<RunResult>, ScenarioError> {
    let mut results: Vec<(usize, RunResult)> = rates
        .par_iter()
        .enumerate()
        .map(|(i, &r)| run_scenario_at(cfg, Some(r)).map(|out| (i, out)))
        .collect::<Result<_, _>>()?;
    results.sort_by_key(|(i, _)| *i);
    Ok(results.into_iter().map(|(_, r)| r).collect())
}

/// Goodput of a sweep: the largest rate whose attainment clears the
/// threshold.
pub fn sweep_goodput(rows: &[RunResult], threshold: f64) -> (f64, bool) {
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.rate, r.report.attainment)).collect();
    max_goodput(&pairs, threshold)
}

/// Run several scenario files at the same rates and merge their summaries,
/// keyed by (engine, rate). Duplicate keys are an input error.
pub fn compare(
    configs: &[(String, ScenarioConfig)],
    rates: &[f64],
) -> Result<Vec<SummaryRow>, ScenarioError> {
    let mut rows = Vec::new();
    for (_, cfg) in configs {
        let runs = if rates.is_empty() {
            vec![run_scenario(cfg)?]
        } else {
            sweep(cfg, rates)?
        };
        rows.extend(runs.iter().map(SummaryRow::from_run));
    }
    let mut keys: Vec<(String, u64)> = rows
        .iter()
        .map(|r| (r.engine.clone(), r.rate.to_bits()))
        .collect();
    keys.sort();
    for w in keys.windows(2) {
        if w[0] == w[1] {
            return Err(ConfigError::new(
                "compare",
                format!(
                    "duplicate (engine, rate) key: ({}, {})",
                    w[0].0,
                    f64::from_bits(w[0].1)
                ),
            )
            .into());
        }
    }
    Ok(rows)
}

// ---- report files ---------------------------------------------------------

pub const REQUESTS_HEADER: &str =
    "id,arrival_s,input_tokens,output_tokens,ttft_s,tpot_s,e2e_s,preemptions";
pub const SUMMARY_HEADER: &str =
    "engine,rate,p50_ttft,p90_ttft,p99_ttft,p50_tpot,p90_tpot,p99_tpot,attainment,mean_e2e";
pub const CONTROLLER_HEADER: &str =
    "window,x,y,x_norm,y_norm,ttft_p,tpot_p,est_ttft,est_tpot,action";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn write_requests_csv(path: impl AsRef<Path>, metrics: &[RequestMetrics]) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|e| ScenarioError::io(&display, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "{REQUESTS_HEADER}")?;
        for m in metrics {
            writeln!(
                w,
                "{},{:.9},{},{},{:.9},{},{:.9},{}",
                m.id,
                m.arrival,
                m.input_len,
                m.output_len,
                m.ttft,
                fmt_opt(m.tpot),
                m.e2e,
                m.preemptions
            )?;
        }
        w.flush()
    })()
    .map_err(|e| ScenarioError::io(&display, e))
}

/// Reload a per-request CSV; used to regenerate summary statistics.
pub fn read_requests_csv(path: impl AsRef<Path>) -> Result<Vec<RequestMetrics>, ScenarioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| ScenarioError::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ScenarioError::io(&display, e))?;
        if i == 0 {
            if line.trim() != REQUESTS_HEADER {
                return Err(TraceError::malformed(&display, 1, "bad header").into());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(TraceError::malformed(&display, i + 1, "expected 8 fields").into());
        }
        let parse_f = |s: &str| s.parse::<f64>();
        out.push(RequestMetrics {
            id: f[0].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad id"))?,
            arrival: parse_f(f[1]).map_err(|_| TraceError::malformed(&display, i + 1, "bad arrival"))?,
            input_len: f[2].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad input"))?,
            output_len: f[3].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad output"))?,
            ttft: parse_f(f[4]).map_err(|_| TraceError::malformed(&display, i + 1, "bad ttft"))?,
            tpot: if f[5].is_empty() {
                None
            } else {
                Some(parse_f(f[5]).map_err(|_| TraceError::malformed(&display, i + 1, "bad tpot"))?)
            },
            e2e: parse_f(f[6]).map_err(|_| TraceError::malformed(&display, i + 1, "bad e2e"))?,
            preemptions: f[7].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad preemptions"))?,
        });
    }
    Ok(out)
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|e| ScenarioError::io(&display, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{:.9},{},{},{},{},{},{},{:.9},{:.9}",
                r.engine,
                r.rate,
                fmt_opt(r.ttft.map(|s| s.p50)),
                fmt_opt(r.ttft.map(|s| s.p90)),
                fmt_opt(r.ttft.map(|s| s.p99)),
                fmt_opt(r.tpot.map(|s| s.p50)),
                fmt_opt(r.tpot.map(|s| s.p90)),
                fmt_opt(r.tpot.map(|s| s.p99)),
                r.attainment,
                r.mean_e2e
            )?;
        }
        w.flush()
    })()
    .map_err(|e| ScenarioError::io(&display, e))
}

pub fn write_controller_csv(
    path: impl AsRef<Path>,
    rows: &[ControllerLogRow],
) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|e| ScenarioError::io(&display, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "{CONTROLLER_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{:.9},{:.9},{:.9},{:.9},{},{},{},{},{}",
                r.window,
                r.x,
                r.y,
                r.x_norm,
                r.y_norm,
                fmt_opt(r.ttft_p),
                fmt_opt(r.tpot_p),
                fmt_opt(r.est_ttft.filter(|v| v.is_finite())),
                fmt_opt(r.est_tpot.filter(|v| v.is_finite())),
                r.action.as_str()
            )?;
        }
        w.flush()
    })()
    .map_err(|e| ScenarioError::io(&display, e))
}

/// Reload a controller log as fitting observations (for offline fits).
pub fn read_controller_csv(path: impl AsRef<Path>) -> Result<Vec<Observation>, ScenarioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| ScenarioError::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ScenarioError::io(&display, e))?;
        if i == 0 {
            if line.trim() != CONTROLLER_HEADER {
                return Err(TraceError::malformed(&display, 1, "bad header").into());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(TraceError::malformed(&display, i + 1, "expected 10 fields").into());
        }
        let opt = |s: &str| -> Result<Option<f64>, std::num::ParseFloatError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some)
            }
        };
        out.push(Observation {
            window: f[0].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad window"))?,
            x_norm: f[3].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad x_norm"))?,
            y_norm: f[4].parse().map_err(|_| TraceError::malformed(&display, i + 1, "bad y_norm"))?,
            ttft_p: opt(f[5]).map_err(|_| TraceError::malformed(&display, i + 1, "bad ttft_p"))?,
            tpot_p: opt(f[6]).map_err(|_| TraceError::malformed(&display, i + 1, "bad tpot_p"))?,
            ttft_count: 0,
            tpot_count: 0,
        });
    }
    Ok(out)
}

fn write_audit(path: &Path, run: &RunResult) -> Result<(), ScenarioError> {
    let display = path.display().to_string();
    let a = &run.output.audit;
    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(text, "arrivals={}", a.arrivals);
    let _ = writeln!(text, "completed={}", a.completed);
    let _ = writeln!(text, "unfinished={}", a.unfinished);
    let _ = writeln!(text, "prefill_iterations={}", a.prefill_iterations);
    let _ = writeln!(text, "decode_iterations={}", a.decode_iterations);
    let _ = writeln!(text, "transfers={}", a.transfers);
    let _ = writeln!(text, "preemptions={}", a.preemptions);
    let _ = writeln!(text, "decode_stalls={}", a.decode_stalls);
    let _ = writeln!(text, "switch_requests={}", a.switch_requests);
    let _ = writeln!(text, "switch_adoptions={}", a.switch_adoptions);
    let _ = writeln!(text, "controller_ticks={}", a.controller_ticks);
    let _ = writeln!(
        text,
        "first_decode_alloc_failure={}",
        a.first_decode_alloc_failure
            .map(|t| format!("{t:.9}"))
            .unwrap_or_else(|| "none".into())
    );
    for (i, hw) in run.output.pool_high_water.iter().enumerate() {
        let _ = writeln!(text, "pool{i}_high_water={hw:.9}");
    }
    let _ = writeln!(text, "final_time={:.9}", run.output.final_time);
    let _ = writeln!(text, "trace_resorted={}", run.trace_resorted);
    fs::write(path, text).map_err(|e| ScenarioError::io(&display, e))
}

/// Execute a scenario and persist its reports: `requests.csv`,
/// `summary.csv`, `controller.csv` (dynamic runs), `audit.txt`, and a copy
/// of the resolved configuration.
pub fn run_to_dir(cfg: &ScenarioConfig, outdir: impl AsRef<Path>) -> Result<RunResult, ScenarioError> {
    let outdir = outdir.as_ref();
    fs::create_dir_all(outdir).map_err(|e| ScenarioError::io(outdir.display().to_string(), e))?;
    let run = run_scenario(cfg)?;

    let resolved = toml::to_string_pretty(cfg)
        .map_err(|e| ConfigError::new("scenario", format!("serialize: {e}")))?;
    fs::write(outdir.join("scenario.toml"), resolved)
        .map_err(|e| ScenarioError::io(outdir.display().to_string(), e))?;

    write_requests_csv(outdir.join("requests.csv"), &run.report.per_request)?;
    write_summary_csv(outdir.join("summary.csv"), &[SummaryRow::from_run(&run)])?;
    if !run.output.controller_log.is_empty() {
        write_controller_csv(outdir.join("controller.csv"), &run.output.controller_log)?;
    }
    write_audit(&outdir.join("audit.txt"), &run)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        [workload]
        preset = "sharegpt-like"
        rate = 4.0
        count = 120
        seed = 7

        [engine]
        kind = "unified-pf"

        [kv]
        capacity_blocks = 20000

        [slo]
        ttft_s = 0.3
        tpot_s = 0.15
        percentile = 0.9
    "#;

    #[test]
    fn parses_and_runs_base_scenario() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        let run = run_scenario(&cfg).unwrap();
        assert_eq!(run.engine, "unified-pf");
        assert_eq!(run.report.per_request.len(), 120);
    }

    #[test]
    fn missing_slo_is_named_error() {
        let text = BASE.replace("[slo]", "[old_slo]").replace("ttft_s = 0.3", "x = 0.3").replace("tpot_s = 0.15", "").replace("percentile = 0.9", "");
        let err = ScenarioConfig::from_toml_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("slo") || msg.contains("old_slo"), "got {msg}");
    }

    #[test]
    fn dynamic_requires_controller_section() {
        let text = BASE
            .replace("kind = \"unified-pf\"", "kind = \"semi-pd\"\ndynamic_partition = true");
        let err = ScenarioConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("controller"), "got {err}");
    }

    #[test]
    fn two_sources_rejected() {
        let text = BASE.replace("preset = \"sharegpt-like\"", "preset = \"sharegpt-like\"\ntrace = \"x.csv\"");
        assert!(ScenarioConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn per_gpu_rate_scales_disaggregated_offered_load() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.offered_rate(4.0), 4.0);
        let text = BASE
            .replace("kind = \"unified-pf\"", "kind = \"disaggregated\"")
            .replace("rate = 4.0", "rate = 4.0\nrate_per_gpu = true");
        let cfg = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.offered_rate(4.0), 8.0);
    }

    #[test]
    fn identical_seed_runs_are_identical() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        run_to_dir(&cfg, &d1).unwrap();
        run_to_dir(&cfg, &d2).unwrap();
        for name in ["requests.csv", "summary.csv", "audit.txt", "scenario.toml"] {
            let a = fs::read(d1.join(name)).unwrap();
            let b = fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn report_regenerates_from_requests_csv() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = run_to_dir(&cfg, dir.path()).unwrap();
        let metrics = read_requests_csv(dir.path().join("requests.csv")).unwrap();
        let slo = cfg.slo.unwrap();
        let regen = MetricsReport::from_metrics(metrics, &slo, cfg.metrics.trim_fraction, vec![]);
        assert_eq!(regen.ttft, run.report.ttft);
        assert_eq!(regen.tpot, run.report.tpot);
        assert_eq!(regen.attainment, run.report.attainment);
        assert_eq!(regen.mean_e2e, run.report.mean_e2e);
    }

    #[test]
    fn sweep_rows_sorted_and_goodput_consistent() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        let rows = sweep(&cfg, &[2.0, 4.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rate, 2.0);
        let (goodput, _) = sweep_goodput(&rows, 0.0);
        assert_eq!(goodput, 4.0);
    }

    #[test]
    fn compare_rejects_duplicate_keys() {
        let cfg = ScenarioConfig::from_toml_str(BASE).unwrap();
        let configs = vec![
            ("a".to_string(), cfg.clone()),
            ("b".to_string(), cfg.clone()),
        ];
        let err = compare(&configs, &[2.0]).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got {err}");
    }

    #[test]
    fn compare_equals_individual_sweeps() {
        let a = ScenarioConfig::from_toml_str(BASE).unwrap();
        let b = ScenarioConfig::from_toml_str(&BASE.replace("unified-pf", "semi-pd")).unwrap();
        let rates = [2.0, 4.0];
        let merged = compare(
            &[("a".into(), a.clone()), ("b".into(), b.clone())],
            &rates,
        )
        .unwrap();
        let mut individual: Vec<SummaryRow> = Vec::new();
        for cfg in [&a, &b] {
            individual.extend(sweep(cfg, &rates).unwrap().iter().map(SummaryRow::from_run));
        }
        assert_eq!(merged.len(), individual.len());
        for (m, i) in merged.iter().zip(&individual) {
            assert_eq!(m.engine, i.engine);
            assert_eq!(m.rate, i.rate);
            assert_eq!(m.attainment, i.attainment);
            assert_eq!(m.ttft.map(|s| s.p90), i.ttft.map(|s| s.p90));
        }
    }

    #[test]
    fn trace_file_workload_runs() {
        let dir = tempfile::tempdir().unwrap();
        let trace_path = dir.path().join("t.csv");
        let params = crate::workload::TraceParams {
            rate: 5.0,
            count: 60,
            input: LengthDist::Constant(100),
            output: LengthDist::Constant(10),
            mixture: None,
            seed: 2,
        };
        crate::workload::write_trace(&trace_path, &generate_trace(&params).unwrap()).unwrap();
        let text = format!(
            r#"
            [workload]
            trace = {trace_path:?}

            [engine]
            kind = "disaggregated"

            [parallelism]
            tp_prefill = 1
            tp_decode = 1

            [kv]
            capacity_blocks = 5000

            [slo]
            ttft_s = 0.3
            tpot_s = 0.15
            "#
        );
        let cfg = ScenarioConfig::from_toml_str(&text).unwrap();
        let run = run_scenario(&cfg).unwrap();
        assert_eq!(run.output.records.len(), 60);
        assert_eq!(run.output.pool_high_water.len(), 2);
    }
}
