//! Iteration cost model: maps batch composition, SM share, and parallelism
//! degree to iteration latency.
//!
//! The core relation is inverse-proportional scaling of a full-GPU latency
//! by the granted SM share, `l_x = (100 / x) * l_100`. Batch work is an
//! additive model: a fixed per-iteration base plus per-token (prefill) or
//! per-sequence and per-attended-KV-token (decode) terms, with an optional
//! quadratic attention term for long prefills.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// SM-percentage shares granted to the prefill and decode workers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub x: f64,
    pub y: f64,
}

impl PartitionConfig {
    pub fn new(x: f64, y: f64) -> Result<Self, ConfigError> {
        let p = Self { x, y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("partition.x", self.x), ("partition.y", self.y)] {
            if !(v > 0.0 && v <= 100.0) {
                return Err(ConfigError::new(
                    name,
                    format!("share must be in (0, 100], got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Cost coefficients, all in seconds (per token / sequence where noted).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Fixed prefill iteration overhead at 100% SMs.
    pub prefill_base: f64,
    /// Seconds per prefill token.
    pub prefill_per_token: f64,
    /// Optional quadratic attention term, seconds per (token of a request)^2.
    pub prefill_attn_quad: f64,
    /// Fixed decode iteration overhead at 100% SMs.
    pub decode_base: f64,
    /// Seconds per decoded sequence in the batch.
    pub decode_per_seq: f64,
    /// Seconds per token of attended KV across the batch.
    pub decode_per_kv_token: f64,
    /// KV footprint per token, bytes.
    pub kv_bytes_per_token: f64,
    /// GPUs per instance.
    pub gpu_count: u32,
}

impl Default for CostParams {
    fn default() -> Self {
        // A 251-token prefill at full share costs ~40 ms and a 64-sequence
        // decode iteration with ~350-token contexts costs ~30 ms.
        Self {
            prefill_base: 0.002,
            prefill_per_token: 1.5e-4,
            prefill_attn_quad: 0.0,
            decode_base: 0.012,
            decode_per_seq: 1.0e-4,
            decode_per_kv_token: 6.0e-7,
            kv_bytes_per_token: 131_072.0,
            gpu_count: 1,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let coeffs = [
            ("cost.prefill_base", self.prefill_base),
            ("cost.prefill_per_token", self.prefill_per_token),
            ("cost.prefill_attn_quad", self.prefill_attn_quad),
            ("cost.decode_base", self.decode_base),
            ("cost.decode_per_seq", self.decode_per_seq),
            ("cost.decode_per_kv_token", self.decode_per_kv_token),
            ("cost.kv_bytes_per_token", self.kv_bytes_per_token),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ConfigError::new(name, format!("must be >= 0, got {v}")));
            }
        }
        let per_work = self.prefill_per_token
            + self.prefill_attn_quad
            + self.decode_per_seq
            + self.decode_per_kv_token;
        if per_work <= 0.0 {
            return Err(ConfigError::new(
                "cost",
                "at least one per-work coefficient must be > 0",
            ));
        }
        if self.gpu_count < 1 {
            return Err(ConfigError::new("cost.gpu_count", "must be >= 1"));
        }
        Ok(())
    }
}

/// TP/PP degrees per phase plus a TP communication-efficiency knob.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelismConfig {
    pub tp_prefill: u32,
    pub tp_decode: u32,
    pub pp_prefill: u32,
    pub pp_decode: u32,
    /// Fraction of ideal speedup retained per TP doubling, in (0, 1].
    pub tp_efficiency: f64,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        Self {
            tp_prefill: 1,
            tp_decode: 1,
            pp_prefill: 1,
            pp_decode: 1,
            tp_efficiency: 0.9,
        }
    }
}

impl ParallelismConfig {
    pub fn validate(&self, decoupled_allowed: bool) -> Result<(), ConfigError> {
        for (name, v) in [
            ("parallelism.tp_prefill", self.tp_prefill),
            ("parallelism.tp_decode", self.tp_decode),
            ("parallelism.pp_prefill", self.pp_prefill),
            ("parallelism.pp_decode", self.pp_decode),
        ] {
            if v < 1 {
                return Err(ConfigError::new(name, "degree must be >= 1"));
            }
        }
        if !(self.tp_efficiency > 0.0 && self.tp_efficiency <= 1.0) {
            return Err(ConfigError::new(
                "parallelism.tp_efficiency",
                format!("must be in (0, 1], got {}", self.tp_efficiency),
            ));
        }
        // Shared-GPU designs tie both phases to one parallel pattern; only a
        // disaggregated deployment may decouple them.
        if !decoupled_allowed
            && (self.tp_prefill != self.tp_decode || self.pp_prefill != self.pp_decode)
        {
            return Err(ConfigError::new(
                "parallelism",
                "prefill and decode parallelism must match for unified and semi-pd engines",
            ));
        }
        Ok(())
    }

    fn tp_speedup(tp: u32, efficiency: f64) -> f64 {
        let tp = f64::from(tp);
        tp * efficiency.powf(tp.log2())
    }

    pub fn prefill_speedup(&self) -> f64 {
        Self::tp_speedup(self.tp_prefill, self.tp_efficiency)
    }

    pub fn decode_speedup(&self) -> f64 {
        Self::tp_speedup(self.tp_decode, self.tp_efficiency)
    }
}

/// Latency of a full-GPU iteration (`l100`) when granted `share` percent of
/// the SMs: `(100 / share) * l100`.
pub fn scaled_latency(l100: f64, share: f64) -> f64 {
    assert!(
        share > 0.0 && share <= 100.0,
        "share must be in (0, 100], got {share}"
    );
    assert!(l100 >= 0.0, "l100 must be >= 0, got {l100}");
    (100.0 / share) * l100
}

/// Shares actually received when processes request `(x, y)`.
///
/// MPS allows the requested total to exceed 100%; competing processes then
/// receive proportionally scaled shares. Requests summing to at most 100%
/// are granted as-is.
pub fn effective_shares(p: PartitionConfig) -> (f64, f64) {
    let total = p.x + p.y;
    if total <= 100.0 {
        (p.x, p.y)
    } else {
        (100.0 * p.x / total, 100.0 * p.y / total)
    }
}

/// Full-GPU latency of a prefill iteration over per-request token counts.
pub fn prefill_l100(batch_tokens: &[u32], c: &CostParams, par: &ParallelismConfig) -> f64 {
    assert!(!batch_tokens.is_empty(), "prefill batch must be nonempty");
    let total: f64 = batch_tokens.iter().map(|&t| f64::from(t)).sum();
    let quad: f64 = batch_tokens
        .iter()
        .map(|&t| f64::from(t) * f64::from(t))
        .sum();
    let l100 = c.prefill_base + c.prefill_per_token * total + c.prefill_attn_quad * quad;
    l100 / par.prefill_speedup()
}

/// Prefill iteration latency at the given SM share.
pub fn prefill_iter_latency(
    batch_tokens: &[u32],
    c: &CostParams,
    par: &ParallelismConfig,
    share: f64,
) -> f64 {
    scaled_latency(prefill_l100(batch_tokens, c, par), share)
}

/// Full-GPU latency of a decode iteration over per-sequence KV lengths.
pub fn decode_l100(batch_kv_lens: &[u32], c: &CostParams, par: &ParallelismConfig) -> f64 {
    assert!(!batch_kv_lens.is_empty(), "decode batch must be nonempty");
    let kv_total: f64 = batch_kv_lens.iter().map(|&t| f64::from(t)).sum();
    let l100 = c.decode_base
        + c.decode_per_seq * batch_kv_lens.len() as f64
        + c.decode_per_kv_token * kv_total;
    l100 / par.decode_speedup()
}

/// Decode iteration latency at the given SM share.
pub fn decode_iter_latency(
    batch_kv_lens: &[u32],
    c: &CostParams,
    par: &ParallelismConfig,
    share: f64,
) -> f64 {
    scaled_latency(decode_l100(batch_kv_lens, c, par), share)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-12)
    }

    #[test]
    fn scaled_latency_arithmetic() {
        assert!(close(scaled_latency(0.040, 50.0), 0.080, 1e-12));
        assert!(close(scaled_latency(0.040, 100.0), 0.040, 1e-12));
        assert!(close(scaled_latency(0.030, 25.0), 0.120, 1e-12));
    }

    #[test]
    #[should_panic(expected = "share must be in (0, 100]")]
    fn scaled_latency_rejects_zero_share() {
        scaled_latency(0.040, 0.0);
    }

    #[test]
    fn effective_shares_cases() {
        let id = effective_shares(PartitionConfig { x: 30.0, y: 70.0 });
        assert_eq!(id, (30.0, 70.0));

        let both_full = effective_shares(PartitionConfig { x: 100.0, y: 100.0 });
        assert!(close(both_full.0, 50.0, 1e-12));
        assert!(close(both_full.1, 50.0, 1e-12));

        let skew = effective_shares(PartitionConfig { x: 80.0, y: 40.0 });
        assert!(close(skew.0, 100.0 * 80.0 / 120.0, 1e-12));
        assert!(close(skew.1, 100.0 * 40.0 / 120.0, 1e-12));
    }

    #[test]
    fn effective_shares_preserve_ratio_and_cap() {
        for &(x, y) in &[(100.0, 100.0), (90.0, 30.0), (55.0, 65.0), (10.0, 95.0)] {
            let (ex, ey) = effective_shares(PartitionConfig { x, y });
            assert!(ex + ey <= 100.0 + 1e-9);
            assert!(close(ex / ey, x / y, 1e-12));
        }
    }

    fn flat_cost(prefill_base: f64, per_token: f64) -> CostParams {
        CostParams {
            prefill_base,
            prefill_per_token: per_token,
            prefill_attn_quad: 0.0,
            ..CostParams::default()
        }
    }

    #[test]
    fn prefill_latency_additive() {
        let c = flat_cost(0.002, 1.0e-5);
        let par = ParallelismConfig {
            tp_efficiency: 1.0,
            ..ParallelismConfig::default()
        };
        // base 2 ms, 0.01 ms/token, batch of 2x500 tokens -> 12 ms at 100%.
        let l = prefill_iter_latency(&[500, 500], &c, &par, 100.0);
        assert!(close(l, 0.012, 1e-12));
        // Same batch at 50% doubles.
        assert!(close(prefill_iter_latency(&[500, 500], &c, &par, 50.0), 0.024, 1e-12));
        // Ideal TP=2 halves.
        let par2 = ParallelismConfig {
            tp_prefill: 2,
            tp_decode: 2,
            tp_efficiency: 1.0,
            ..ParallelismConfig::default()
        };
        assert!(close(prefill_iter_latency(&[500, 500], &c, &par2, 100.0), 0.006, 1e-12));
    }

    #[test]
    fn decode_latency_additive() {
        let c = CostParams {
            decode_base: 0.001,
            decode_per_seq: 5.0e-5,
            decode_per_kv_token: 1.0e-7,
            ..CostParams::default()
        };
        let par = ParallelismConfig {
            tp_efficiency: 1.0,
            ..ParallelismConfig::default()
        };
        // 1 ms + 10 * 0.05 ms + 10 * 1000 * 0.0001 ms = 2.5 ms at 100%.
        let batch = vec![1000u32; 10];
        assert!(close(decode_iter_latency(&batch, &c, &par, 100.0), 0.0025, 1e-12));
        assert!(close(decode_iter_latency(&batch, &c, &par, 25.0), 0.010, 1e-12));
        // Degenerate single sequence with empty KV.
        assert!(close(decode_iter_latency(&[0], &c, &par, 100.0), 0.00105, 1e-12));
    }

    #[test]
    #[should_panic(expected = "nonempty")]
    fn empty_prefill_batch_rejected() {
        prefill_iter_latency(&[], &CostParams::default(), &ParallelismConfig::default(), 100.0);
    }

    #[test]
    #[should_panic(expected = "nonempty")]
    fn empty_decode_batch_rejected() {
        decode_iter_latency(&[], &CostParams::default(), &ParallelismConfig::default(), 100.0);
    }

    #[test]
    fn latency_monotone_in_share_and_work() {
        let c = CostParams::default();
        let par = ParallelismConfig::default();
        let mut last = f64::INFINITY;
        for share in [10.0, 25.0, 50.0, 75.0, 100.0] {
            let l = prefill_iter_latency(&[251], &c, &par, share);
            assert!(l < last, "latency must strictly decrease in share");
            last = l;
        }
        assert!(
            prefill_iter_latency(&[300], &c, &par, 50.0)
                > prefill_iter_latency(&[200], &c, &par, 50.0)
        );
        assert!(
            decode_iter_latency(&[100, 100], &c, &par, 50.0)
                > decode_iter_latency(&[100], &c, &par, 50.0)
        );
    }

    #[test]
    fn default_calibration_regime() {
        let c = CostParams::default();
        let par = ParallelismConfig::default();
        let prefill = prefill_iter_latency(&[251], &c, &par, 100.0);
        assert!((0.030..=0.050).contains(&prefill), "got {prefill}");
        let decode = decode_iter_latency(&vec![350u32; 64], &c, &par, 100.0);
        assert!((0.020..=0.040).contains(&decode), "got {decode}");
    }

    #[test]
    fn tp_speedup_uses_efficiency_per_doubling() {
        let par = ParallelismConfig {
            tp_prefill: 4,
            tp_decode: 4,
            tp_efficiency: 0.9,
            ..ParallelismConfig::default()
        };
        // 4 * 0.9^2 = 3.24
        assert!(close(par.prefill_speedup(), 3.24, 1e-12));
    }
}
