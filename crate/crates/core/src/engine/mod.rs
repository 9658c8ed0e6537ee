//! The five serving designs as pluggable engines over the event core:
//! unified prefill-first, unified decode-first, unified chunked-prefill,
//! disaggregated 1P1D with KV transfer, and semi-PD (disaggregated compute
//! over unified storage) with asynchronous workers and a low-overhead
//! partition switch.

mod exec;

pub use exec::{Engine, SimOutput};

use serde::{Deserialize, Serialize};

use crate::cost::PartitionConfig;
use crate::error::ConfigError;

/// Serving design selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineKind {
    #[serde(rename = "unified-pf")]
    UnifiedPrefillFirst,
    #[serde(rename = "unified-df")]
    UnifiedDecodeFirst,
    #[serde(rename = "unified-chunked")]
    UnifiedChunked,
    #[serde(rename = "disaggregated")]
    Disaggregated,
    #[serde(rename = "semi-pd")]
    SemiPd,
}

impl EngineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EngineKind::UnifiedPrefillFirst => "unified-pf",
            EngineKind::UnifiedDecodeFirst => "unified-df",
            EngineKind::UnifiedChunked => "unified-chunked",
            EngineKind::Disaggregated => "disaggregated",
            EngineKind::SemiPd => "semi-pd",
        }
    }

    /// GPUs an instance of this design occupies. The disaggregated design
    /// runs one prefill and one decode instance (1P1D).
    pub fn gpu_multiplier(&self) -> u32 {
        match self {
            EngineKind::Disaggregated => 2,
            _ => 1,
        }
    }
}

/// How KV transfer between disaggregated instances is priced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Link bandwidth in bytes/second; delay = tokens * bytes_per_token / bw.
    Bandwidth(f64),
    /// Delay equal to one single-sequence decode iteration at full share.
    OneDecodeIteration,
}

/// A pre-scheduled partition switch, useful for scripted experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSwitch {
    pub at_s: f64,
    pub x: f64,
    pub y: f64,
}

/// Engine parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub kind: EngineKind,
    pub max_batch_size: usize,
    /// Token budget per iteration; chunked engine only.
    pub chunk_size: u32,
    /// Disaggregated engine only.
    pub transfer: TransferMode,
    /// Seconds between a switch request and the new partition being ready.
    pub switch_prep_delay_s: f64,
    /// When set, a switch also stalls both workers for the whole
    /// preparation window (process-reload behavior, for contrast).
    pub naive_switch: bool,
    pub initial_partition: PartitionConfig,
    /// Run the SLO-aware partition controller (semi-PD only).
    pub dynamic_partition: bool,
    /// Evict-and-recompute on decode block exhaustion; when disabled the
    /// victim stalls instead.
    pub preemption: bool,
    pub scripted_switches: Vec<ScriptedSwitch>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            kind: EngineKind::SemiPd,
            max_batch_size: 512,
            chunk_size: 1024,
            transfer: TransferMode::OneDecodeIteration,
            switch_prep_delay_s: 0.5,
            naive_switch: false,
            initial_partition: PartitionConfig { x: 100.0, y: 100.0 },
            dynamic_partition: false,
            preemption: true,
            scripted_switches: Vec::new(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_batch_size < 1 {
            return Err(ConfigError::new("engine.max_batch_size", "must be >= 1"));
        }
        if self.chunk_size < 1 {
            return Err(ConfigError::new("engine.chunk_size", "must be >= 1"));
        }
        if let TransferMode::Bandwidth(bw) = self.transfer {
            if !(bw > 0.0) {
                return Err(ConfigError::new("engine.transfer", "bandwidth must be > 0"));
            }
        }
        if !(self.switch_prep_delay_s >= 0.0) {
            return Err(ConfigError::new(
                "engine.switch_prep_delay_s",
                "must be >= 0",
            ));
        }
        self.initial_partition.validate()?;
        if self.dynamic_partition && self.kind != EngineKind::SemiPd {
            return Err(ConfigError::new(
                "engine.dynamic_partition",
                "the partition controller requires kind = \"semi-pd\"",
            ));
        }
        for (i, s) in self.scripted_switches.iter().enumerate() {
            if self.kind != EngineKind::SemiPd {
                return Err(ConfigError::new(
                    format!("engine.scripted_switches[{i}]"),
                    "switches require kind = \"semi-pd\"",
                ));
            }
            PartitionConfig { x: s.x, y: s.y }.validate()?;
            if !(s.at_s >= 0.0) {
                return Err(ConfigError::new(
                    format!("engine.scripted_switches[{i}].at_s"),
                    "must be >= 0",
                ));
            }
        }
        Ok(())
    }
}

/// Pool sizes resolved from the scenario's KV section.
#[derive(Debug, Clone, Copy)]
pub struct PoolSizing {
    pub block_size: u32,
    /// Capacity of the shared pool (unified/semi-PD) or of each instance
    /// pool (disaggregated).
    pub blocks: u64,
    /// Disaggregated decode-instance override, for storage experiments.
    pub decode_blocks: Option<u64>,
}

/// Completed-request timeline. `prefill_done` is the first-token time; the
/// timestamps are totally ordered per request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub first_scheduled: f64,
    pub prefill_done: f64,
    pub completed: f64,
    pub preemptions: u32,
    /// Total KV transfer delay charged to this request (disaggregated).
    pub transfer_delay: f64,
}

/// Event and lifecycle counters for the run audit.
#[derive(Debug, Clone, Default)]
pub struct AuditCounters {
    pub arrivals: u64,
    pub prefill_iterations: u64,
    pub decode_iterations: u64,
    pub transfers: u64,
    pub preemptions: u64,
    pub decode_stalls: u64,
    pub switch_requests: u64,
    pub switch_adoptions: u64,
    pub controller_ticks: u64,
    pub completed: u64,
    pub unfinished: u64,
    /// Virtual time of the first failed decode-side block allocation, if any.
    pub first_decode_alloc_failure: Option<f64>,
}

/// A worker adopting a partition coordinate, for the switch audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionEvent {
    pub time: f64,
    /// true = prefill worker, false = decode worker.
    pub prefill_worker: bool,
    pub x: f64,
    pub y: f64,
}

/// Load snapshot of one instance, as seen by a cluster router.
#[derive(Debug, Clone, Copy)]
pub struct InstanceSnapshot {
    pub waiting_depth: usize,
    pub kv_utilization: f64,
}

/// Pick the instance with the shallowest waiting queue, breaking ties by
/// lower KV utilization and then by lowest instance id.
pub fn route_request(instances: &[InstanceSnapshot]) -> usize {
    assert!(!instances.is_empty(), "router needs at least one instance");
    let mut best = 0;
    for (i, s) in instances.iter().enumerate().skip(1) {
        let b = &instances[best];
        if s.waiting_depth < b.waiting_depth
            || (s.waiting_depth == b.waiting_depth && s.kv_utilization < b.kv_utilization)
        {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(depth: usize, util: f64) -> InstanceSnapshot {
        InstanceSnapshot {
            waiting_depth: depth,
            kv_utilization: util,
        }
    }

    #[test]
    fn router_prefers_shallow_queue() {
        let got = route_request(&[snap(3, 0.1), snap(1, 0.9), snap(2, 0.0)]);
        assert_eq!(got, 1);
    }

    #[test]
    fn router_breaks_depth_ties_by_utilization() {
        let got = route_request(&[snap(2, 0.9), snap(2, 0.4)]);
        assert_eq!(got, 1);
    }

    #[test]
    fn router_full_tie_goes_to_lowest_id() {
        let got = route_request(&[snap(1, 0.5), snap(1, 0.5), snap(1, 0.5)]);
        assert_eq!(got, 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EngineConfig::default();
        cfg.kind = EngineKind::UnifiedPrefillFirst;
        cfg.dynamic_partition = true;
        assert!(cfg.validate().is_err());

        let mut cfg = EngineConfig::default();
        cfg.max_batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = EngineConfig::default();
        cfg.transfer = TransferMode::Bandwidth(0.0);
        assert!(cfg.validate().is_err());

        assert!(EngineConfig::default().validate().is_ok());
    }
}
