//! SLO-aware dynamic partition controller.
//!
//! Every `window_size` decode iterations the controller observes windowed
//! TTFT/TPOT percentiles, refits the inverse-share latency models
//!
//! ```text
//! ttft(x') = a1 / (x' - lambda) + b1        tpot(y') = a2 / y' + b2
//! ```
//!
//! (shares normalized to x' = 100x/(x+y)), and walks the partition toward
//! the failing metric in `step_size` increments, at most `max_step` steps
//! per window. When an increase would push a share past 100, the other
//! share is reduced instead. If both metrics fail there is no space to
//! trade and the partition is left unchanged.

use serde::{Deserialize, Serialize};

use crate::cost::PartitionConfig;
use crate::error::ConfigError;
use crate::metrics::{percentile, SloConfig};

/// Adjustment cadence and learning rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Decode iterations per adjustment window.
    pub window_size: u64,
    /// Maximum steps per window.
    pub max_step: u32,
    /// Share percent moved per step.
    pub step_size: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            window_size: 200,
            max_step: 6,
            step_size: 5.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_size == 0 {
            return Err(ConfigError::new("controller.window_size", "must be > 0"));
        }
        if self.max_step == 0 {
            return Err(ConfigError::new("controller.max_step", "must be > 0"));
        }
        if !(self.step_size > 0.0) {
            return Err(ConfigError::new("controller.step_size", "must be > 0"));
        }
        Ok(())
    }
}

/// Fitted estimator coefficients for both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub a1: f64,
    pub b1: f64,
    pub lambda: f64,
    pub a2: f64,
    pub b2: f64,
    pub r2_ttft: f64,
    pub r2_tpot: f64,
    pub ttft_fitted: bool,
    pub tpot_fitted: bool,
    /// Set when a fitted slope came out negative and was clamped to zero.
    pub degraded: bool,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            a1: 0.0,
            b1: 0.0,
            lambda: 0.0,
            a2: 0.0,
            b2: 0.0,
            r2_ttft: 0.0,
            r2_tpot: 0.0,
            ttft_fitted: false,
            tpot_fitted: false,
            degraded: false,
        }
    }
}

/// One window's observation: normalized shares and observed percentiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub window: u64,
    pub x_norm: f64,
    pub y_norm: f64,
    pub ttft_p: Option<f64>,
    pub tpot_p: Option<f64>,
    pub ttft_count: usize,
    pub tpot_count: usize,
}

/// Normalized shares in percent: x' = 100x/(x+y), y' = 100y/(x+y).
pub fn normalized_shares(p: PartitionConfig) -> (f64, f64) {
    let total = p.x + p.y;
    (100.0 * p.x / total, 100.0 * p.y / total)
}

/// Windowed percentile observation over raw TTFT and TPOT samples.
/// An empty side yields no observation for that metric.
pub fn observe_window(ttfts: &[f64], tpots: &[f64], p: f64) -> (Option<f64>, Option<f64>) {
    let t = (!ttfts.is_empty()).then(|| percentile(ttfts, p));
    let d = (!tpots.is_empty()).then(|| percentile(tpots, p));
    (t, d)
}

/// A model estimate; `Saturated` means the queue is unstable at this share
/// (the share does not exceed the fitted arrival pressure) and is treated
/// as failing the SLO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Value(f64),
    Saturated,
}

impl Estimate {
    /// True when the estimate exceeds the bound (saturation always does).
    pub fn exceeds(&self, bound: f64) -> bool {
        match self {
            Estimate::Value(v) => *v > bound,
            Estimate::Saturated => true,
        }
    }
}

pub fn estimate_ttft(m: &LatencyModel, x_norm: f64) -> Estimate {
    if x_norm <= m.lambda {
        Estimate::Saturated
    } else {
        Estimate::Value(m.a1 / (x_norm - m.lambda) + m.b1)
    }
}

pub fn estimate_tpot(m: &LatencyModel, y_norm: f64) -> Estimate {
    assert!(y_norm > 0.0, "y_norm must be > 0");
    Estimate::Value(m.a2 / y_norm + m.b2)
}

/// Ordinary least squares of `y` on `u`; returns (slope, intercept, rss, tss).
fn ols(u: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = u.len() as f64;
    let um = u.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = u.iter().map(|&v| (v - um) * (v - um)).sum();
    let sxy: f64 = u.iter().zip(y).map(|(&v, &w)| (v - um) * (w - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ym - slope * um;
    let rss: f64 = u
        .iter()
        .zip(y)
        .map(|(&v, &w)| {
            let e = w - (slope * v + intercept);
            e * e
        })
        .sum();
    let tss: f64 = y.iter().map(|&w| (w - ym) * (w - ym)).sum();
    (slope, intercept, rss, tss)
}

fn r_squared(rss: f64, tss: f64) -> f64 {
    if tss > 0.0 {
        1.0 - rss / tss
    } else {
        1.0
    }
}

fn distinct_count(values: &[f64]) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    sorted.len()
}

const LAMBDA_GRID_STEP: f64 = 0.25;
const LAMBDA_MARGIN: f64 = 0.5;

/// Fit both sides of the latency model from the observation history.
///
/// The TPOT side is a single least squares of tpot against 1/y'. The TTFT
/// side grid-searches lambda at 0.25-percent resolution below the smallest
/// observed share and keeps the lambda minimizing the residual sum of
/// squares. A side without two distinct shares retains the previous fit.
pub fn fit_latency_model(history: &[Observation], prev: &LatencyModel) -> LatencyModel {
    let mut model = *prev;
    model.degraded = false;

    let ttft_pts: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|o| o.ttft_p.map(|t| (o.x_norm, t)))
        .collect();
    let xs: Vec<f64> = ttft_pts.iter().map(|p| p.0).collect();
    if distinct_count(&xs) >= 2 {
        let ts: Vec<f64> = ttft_pts.iter().map(|p| p.1).collect();
        let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_lambda = (min_x - LAMBDA_MARGIN).max(0.0);
        let steps = (max_lambda / LAMBDA_GRID_STEP).floor() as usize;
        let mut best: Option<(f64, f64, f64, f64, f64)> = None; // (rss, lambda, a, b, tss)
        for k in 0..=steps {
            let lambda = k as f64 * LAMBDA_GRID_STEP;
            let u: Vec<f64> = xs.iter().map(|&x| 1.0 / (x - lambda)).collect();
            let (a, b, rss, tss) = ols(&u, &ts);
            if best.is_none_or(|(brss, ..)| rss < brss) {
                best = Some((rss, lambda, a, b, tss));
            }
        }
        if let Some((rss, lambda, mut a, mut b, tss)) = best {
            if a < 0.0 {
                a = 0.0;
                b = ts.iter().sum::<f64>() / ts.len() as f64;
                model.degraded = true;
                let rss_flat: f64 = ts.iter().map(|&t| (t - b) * (t - b)).sum();
                model.r2_ttft = r_squared(rss_flat, tss);
            } else {
                model.r2_ttft = r_squared(rss, tss);
            }
            model.a1 = a;
            model.b1 = b;
            model.lambda = lambda;
            model.ttft_fitted = true;
        }
    }

    let tpot_pts: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|o| o.tpot_p.map(|t| (o.y_norm, t)))
        .collect();
    let ys: Vec<f64> = tpot_pts.iter().map(|p| p.0).collect();
    if distinct_count(&ys) >= 2 {
        let ts: Vec<f64> = tpot_pts.iter().map(|p| p.1).collect();
        let u: Vec<f64> = ys.iter().map(|&y| 1.0 / y).collect();
        let (mut a, mut b, rss, tss) = ols(&u, &ts);
        if a < 0.0 {
            a = 0.0;
            b = ts.iter().sum::<f64>() / ts.len() as f64;
            model.degraded = true;
            let rss_flat: f64 = ts.iter().map(|&t| (t - b) * (t - b)).sum();
            model.r2_tpot = r_squared(rss_flat, tss);
        } else {
            model.r2_tpot = r_squared(rss, tss);
        }
        model.a2 = a;
        model.b2 = b;
        model.tpot_fitted = true;
    }

    model
}

/// What the adjustment pass decided, for the controller log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjustAction {
    /// Off-window call; nothing to do.
    Hold,
    /// Both metrics pass.
    Pass,
    /// Both metrics fail; no space to trade.
    BothFail,
    /// Raised the prefill share (or lowered decode on overflow).
    AdjustX,
    /// Raised the decode share (or lowered prefill on overflow).
    AdjustY,
    /// Model not fitted yet; took a single exploratory step.
    ProbeX,
    ProbeY,
}

impl AdjustAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdjustAction::Hold => "hold",
            AdjustAction::Pass => "pass",
            AdjustAction::BothFail => "both-fail",
            AdjustAction::AdjustX => "adjust-x",
            AdjustAction::AdjustY => "adjust-y",
            AdjustAction::ProbeX => "probe-x",
            AdjustAction::ProbeY => "probe-y",
        }
    }
}

/// One step in the "raise x" direction: increase x, or reduce y when x
/// would overflow 100. Returns false when the step would drive the other
/// share to zero or below and must be skipped.
fn step_toward_x(p: &mut PartitionConfig, step: f64) -> bool {
    if p.x + step <= 100.0 {
        p.x += step;
        true
    } else if p.y - step > 0.0 {
        p.y -= step;
        true
    } else {
        false
    }
}

fn step_toward_y(p: &mut PartitionConfig, step: f64) -> bool {
    if p.y + step <= 100.0 {
        p.y += step;
        true
    } else if p.x - step > 0.0 {
        p.x -= step;
        true
    } else {
        false
    }
}

/// The per-window adjustment decision.
///
/// Branching between the four outcomes uses the observed percentiles; the
/// estimator model only steers the step loop. Before the first successful
/// fit of the failing side the controller takes a single exploratory step
/// in the indicated direction, which also diversifies the observed shares
/// so the next fit can succeed.
pub fn adjust_partition(
    iter: u64,
    current: PartitionConfig,
    slo: &SloConfig,
    cfg: &ControllerConfig,
    model: &LatencyModel,
    obs: &Observation,
) -> (PartitionConfig, AdjustAction) {
    if !iter.is_multiple_of(cfg.window_size) {
        return (current, AdjustAction::Hold);
    }
    let ttft_fails = obs.ttft_p.is_some_and(|t| t > slo.ttft_s);
    let tpot_fails = obs.tpot_p.is_some_and(|t| t > slo.tpot_s);

    if ttft_fails && tpot_fails {
        return (current, AdjustAction::BothFail);
    }
    let mut p = current;
    if ttft_fails {
        if !model.ttft_fitted {
            step_toward_x(&mut p, cfg.step_size);
            return (p, AdjustAction::ProbeX);
        }
        let mut step = 0;
        let (mut x_norm, _) = normalized_shares(p);
        if !estimate_ttft(model, x_norm).exceeds(slo.ttft_s) {
            // The estimator claims the current share already passes even
            // though the observation failed; it cannot guide the loop, so
            // take one corrective step instead of freezing.
            step_toward_x(&mut p, cfg.step_size);
            return (p, AdjustAction::ProbeX);
        }
        while step < cfg.max_step && estimate_ttft(model, x_norm).exceeds(slo.ttft_s) {
            if !step_toward_x(&mut p, cfg.step_size) {
                break;
            }
            step += 1;
            x_norm = normalized_shares(p).0;
        }
        (p, AdjustAction::AdjustX)
    } else if tpot_fails {
        if !model.tpot_fitted {
            step_toward_y(&mut p, cfg.step_size);
            return (p, AdjustAction::ProbeY);
        }
        let mut step = 0;
        let (_, mut y_norm) = normalized_shares(p);
        if !estimate_tpot(model, y_norm).exceeds(slo.tpot_s) {
            step_toward_y(&mut p, cfg.step_size);
            return (p, AdjustAction::ProbeY);
        }
        while step < cfg.max_step && estimate_tpot(model, y_norm).exceeds(slo.tpot_s) {
            if !step_toward_y(&mut p, cfg.step_size) {
                break;
            }
            step += 1;
            y_norm = normalized_shares(p).1;
        }
        (p, AdjustAction::AdjustY)
    } else {
        (current, AdjustAction::Pass)
    }
}

/// One row of the per-window controller log CSV.
#[derive(Debug, Clone)]
pub struct ControllerLogRow {
    pub window: u64,
    pub x: f64,
    pub y: f64,
    pub x_norm: f64,
    pub y_norm: f64,
    pub ttft_p: Option<f64>,
    pub tpot_p: Option<f64>,
    pub est_ttft: Option<f64>,
    pub est_tpot: Option<f64>,
    pub action: AdjustAction,
}

/// Windowed controller driver owned by the semi-PD engine's event loop.
#[derive(Debug)]
pub struct Controller {
    pub slo: SloConfig,
    pub cfg: ControllerConfig,
    pub model: LatencyModel,
    pub history: Vec<Observation>,
    pub log: Vec<ControllerLogRow>,
    window: u64,
}

impl Controller {
    pub fn new(slo: SloConfig, cfg: ControllerConfig) -> Self {
        Self {
            slo,
            cfg,
            model: LatencyModel::default(),
            history: Vec::new(),
            log: Vec::new(),
            window: 0,
        }
    }

    /// Run one window: observe, refit, adjust. Returns the new partition.
    pub fn on_window(
        &mut self,
        iter: u64,
        current: PartitionConfig,
        ttfts: &[f64],
        tpots: &[f64],
    ) -> PartitionConfig {
        self.window += 1;
        let (x_norm, y_norm) = normalized_shares(current);
        let (ttft_p, tpot_p) = observe_window(ttfts, tpots, self.slo.percentile);
        let obs = Observation {
            window: self.window,
            x_norm,
            y_norm,
            ttft_p,
            tpot_p,
            ttft_count: ttfts.len(),
            tpot_count: tpots.len(),
        };
        self.history.push(obs);
        self.model = fit_latency_model(&self.history, &self.model);
        let (next, action) = adjust_partition(iter, current, &self.slo, &self.cfg, &self.model, &obs);
        self.log.push(ControllerLogRow {
            window: self.window,
            x: current.x,
            y: current.y,
            x_norm,
            y_norm,
            ttft_p,
            tpot_p,
            est_ttft: self
                .model
                .ttft_fitted
                .then(|| match estimate_ttft(&self.model, x_norm) {
                    Estimate::Value(v) => v,
                    Estimate::Saturated => f64::INFINITY,
                }),
            est_tpot: self
                .model
                .tpot_fitted
                .then(|| match estimate_tpot(&self.model, y_norm) {
                    Estimate::Value(v) => v,
                    Estimate::Saturated => f64::INFINITY,
                }),
            action,
        });
        next
    }
}
