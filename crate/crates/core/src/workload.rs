//! Request trace generation and loading.
//!
//! Traces use Poisson arrivals (i.i.d. exponential inter-arrival gaps) and
//! configurable input/output length distributions, with presets that mimic
//! chatbot-style, long-context, and heterogeneous mixes. Generation is a
//! pure function of the parameters: the same seed always produces the same
//! trace, and arrivals are quantized to nanoseconds so a written trace
//! reloads losslessly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, TraceError};

/// One serving request: arrival time plus prompt and generation lengths.
///
/// The generation length is known to the simulator so it can schedule the
/// completion event, but engines must never consult it for scheduling
/// decisions; only the completion check reads it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Request {
    pub id: u64,
    pub arrival: f64,
    pub input_len: u32,
    pub output_len: u32,
}

fn default_max_len() -> u32 {
    8192
}

/// Length distribution descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDist {
    Constant(u32),
    Uniform {
        lo: u32,
        hi: u32,
    },
    Lognormal {
        mu: f64,
        sigma: f64,
        #[serde(default = "default_max_len")]
        max: u32,
    },
    Empirical {
        values: Vec<u32>,
        weights: Vec<f64>,
    },
}

impl LengthDist {
    /// Lognormal with the given arithmetic mean (tokens) and log-space sigma.
    pub fn lognormal_with_mean(mean: f64, sigma: f64, max: u32) -> Self {
        LengthDist::Lognormal {
            mu: mean.ln() - sigma * sigma / 2.0,
            sigma,
            max,
        }
    }

    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        match self {
            LengthDist::Constant(v) => {
                if *v < 1 {
                    return Err(ConfigError::new(field, "constant length must be >= 1"));
                }
            }
            LengthDist::Uniform { lo, hi } => {
                if *lo < 1 || hi < lo {
                    return Err(ConfigError::new(
                        field,
                        format!("uniform bounds must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"),
                    ));
                }
            }
            LengthDist::Lognormal { mu, sigma, max } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                    return Err(ConfigError::new(
                        field,
                        format!("lognormal(mu={mu}, sigma={sigma}) is invalid"),
                    ));
                }
                if *max < 1 {
                    return Err(ConfigError::new(field, "lognormal max must be >= 1"));
                }
            }
            LengthDist::Empirical { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(ConfigError::new(
                        field,
                        "empirical distribution needs matching nonempty values/weights",
                    ));
                }
                if values.iter().any(|&v| v < 1) {
                    return Err(ConfigError::new(field, "empirical values must be >= 1"));
                }
                if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite())
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    return Err(ConfigError::new(
                        field,
                        "empirical weights must be nonnegative with positive sum",
                    ));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match self {
            LengthDist::Constant(v) => *v,
            LengthDist::Uniform { lo, hi } => rng.gen_range(*lo..=*hi),
            LengthDist::Lognormal { mu, sigma, max } => {
                let d = LogNormal::new(*mu, *sigma).expect("validated params");
                let v = d.sample(rng).round();
                (v.max(1.0) as u32).min(*max).max(1)
            }
            LengthDist::Empirical { values, weights } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (v, w) in values.iter().zip(weights) {
                    u -= w;
                    if u <= 0.0 {
                        return *v;
                    }
                }
                *values.last().unwrap()
            }
        }
    }
}

/// A mixture component overriding the base length distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    #[serde(default)]
    pub input: Option<LengthDist>,
    #[serde(default)]
    pub output: Option<LengthDist>,
}

/// Parameters of a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    /// Mean arrival rate, requests/second.
    pub rate: f64,
    /// Number of requests.
    pub count: usize,
    pub input: LengthDist,
    pub output: LengthDist,
    #[serde(default)]
    pub mixture: Option<Vec<MixtureComponent>>,
    pub seed: u64,
}

impl TraceParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(ConfigError::new(
                "workload.rate",
                format!("rate must be > 0, got {}", self.rate),
            ));
        }
        if self.count == 0 {
            return Err(ConfigError::new("workload.count", "count must be > 0"));
        }
        self.input.validate("workload.input")?;
        self.output.validate("workload.output")?;
        if let Some(mix) = &self.mixture {
            if mix.is_empty() {
                return Err(ConfigError::new("workload.mixture", "mixture is empty"));
            }
            let sum: f64 = mix.iter().map(|c| c.weight).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ConfigError::new(
                    "workload.mixture",
                    format!("weights must sum to 1, got {sum}"),
                ));
            }
            for (i, c) in mix.iter().enumerate() {
                if !(c.weight >= 0.0) {
                    return Err(ConfigError::new(
                        format!("workload.mixture[{i}].weight"),
                        "weight must be >= 0",
                    ));
                }
                if let Some(d) = &c.input {
                    d.validate(&format!("workload.mixture[{i}].input"))?;
                }
                if let Some(d) = &c.output {
                    d.validate(&format!("workload.mixture[{i}].output"))?;
                }
            }
        }
        Ok(())
    }
}

/// Named workload presets. Length scales beyond the 251-token chat mean are
/// engineering defaults, not measurements.
pub fn preset(name: &str) -> Option<TraceParams> {
    let sharegpt_input = LengthDist::lognormal_with_mean(251.0, 1.0, 8192);
    let sharegpt_output = LengthDist::lognormal_with_mean(200.0, 1.0, 8192);
    let base = TraceParams {
        rate: 1.0,
        count: 1000,
        input: sharegpt_input.clone(),
        output: sharegpt_output.clone(),
        mixture: None,
        seed: 0,
    };
    match name {
        "sharegpt-like" => Some(base),
        "longbench-like" => Some(TraceParams {
            input: LengthDist::lognormal_with_mean(3000.0, 0.8, 8192),
            ..base
        }),
        "heterogeneous" => Some(TraceParams {
            mixture: Some(vec![
                MixtureComponent {
                    weight: 0.95,
                    input: None,
                    output: None,
                },
                MixtureComponent {
                    weight: 0.05,
                    input: Some(LengthDist::Constant(4096)),
                    output: None,
                },
            ]),
            ..base
        }),
        _ => None,
    }
}

/// Quantize a timestamp to the 9-decimal resolution of the trace schema.
fn quantize_ns(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

/// Generate a trace. Deterministic for a fixed `TraceParams` (seed included).
pub fn generate_trace(p: &TraceParams) -> Result<Vec<Request>, ConfigError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let gap = Exp::new(p.rate).expect("rate validated");
    let mut t = 0.0f64;
    let mut out = Vec::with_capacity(p.count);
    for id in 0..p.count {
        t += gap.sample(&mut rng);
        let (input_dist, output_dist) = match &p.mixture {
            None => (&p.input, &p.output),
            Some(mix) => {
                let mut u = rng.gen::<f64>();
                let mut chosen = mix.last().unwrap();
                for c in mix {
                    u -= c.weight;
                    if u <= 0.0 {
                        chosen = c;
                        break;
                    }
                }
                (
                    chosen.input.as_ref().unwrap_or(&p.input),
                    chosen.output.as_ref().unwrap_or(&p.output),
                )
            }
        };
        let input_len = input_dist.sample(&mut rng);
        let output_len = output_dist.sample(&mut rng);
        out.push(Request {
            id: id as u64,
            arrival: quantize_ns(t),
            input_len,
            output_len,
        });
    }
    Ok(out)
}

/// Result of loading a trace file.
#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub requests: Vec<Request>,
    /// Set when the file's arrivals were not nondecreasing and the rows were
    /// re-sorted.
    pub resorted: bool,
}

pub const TRACE_HEADER: &str = "arrival_s,input_tokens,output_tokens";

/// Load a trace CSV (`arrival_s,input_tokens,output_tokens`, header
/// required). Ids are assigned by row order; rows are sorted by arrival.
pub fn load_trace(path: impl AsRef<Path>) -> Result<LoadedTrace, TraceError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| TraceError::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut requests = Vec::new();
    let mut lines = reader.lines().enumerate();

    match lines.next() {
        None => {
            return Ok(LoadedTrace {
                requests,
                resorted: false,
            })
        }
        Some((_, line)) => {
            let line = line.map_err(|e| TraceError::io(&display, e))?;
            if line.trim() != TRACE_HEADER {
                return Err(TraceError::malformed(
                    &display,
                    1,
                    format!("expected header `{TRACE_HEADER}`, got `{line}`"),
                ));
            }
        }
    }

    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| TraceError::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(TraceError::malformed(
                &display,
                lineno,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let arrival: f64 = fields[0].trim().parse().map_err(|_| {
            TraceError::malformed(&display, lineno, format!("bad arrival_s `{}`", fields[0]))
        })?;
        let input_len: u32 = fields[1].trim().parse().map_err(|_| {
            TraceError::malformed(&display, lineno, format!("bad input_tokens `{}`", fields[1]))
        })?;
        let output_len: u32 = fields[2].trim().parse().map_err(|_| {
            TraceError::malformed(
                &display,
                lineno,
                format!("bad output_tokens `{}`", fields[2]),
            )
        })?;
        if !(arrival >= 0.0) || !arrival.is_finite() {
            return Err(TraceError::malformed(
                &display,
                lineno,
                format!("arrival_s must be >= 0, got {arrival}"),
            ));
        }
        if input_len < 1 || output_len < 1 {
            return Err(TraceError::malformed(
                &display,
                lineno,
                "token lengths must be >= 1",
            ));
        }
        requests.push(Request {
            id: requests.len() as u64,
            arrival,
            input_len,
            output_len,
        });
    }

    let monotone = requests.windows(2).all(|w| w[0].arrival <= w[1].arrival);
    if !monotone {
        requests.sort_by(|a, b| a.arrival.partial_cmp(&b.arrival).unwrap());
    }
    Ok(LoadedTrace {
        requests,
        resorted: !monotone,
    })
}

/// Write a trace in the bit-exact CSV schema (9 decimal digits of arrival).
pub fn write_trace(path: impl AsRef<Path>, requests: &[Request]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| TraceError::io(&display, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in requests {
            writeln!(w, "{:.9},{},{}", r.arrival, r.input_len, r.output_len)?;
        }
        w.flush()
    })()
    .map_err(|e| TraceError::io(&display, e))
}
