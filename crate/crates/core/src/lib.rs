//! Discrete-event simulator and scheduling library for LLM serving designs:
//! unified (prefill-first, decode-first, chunked-prefill), disaggregated
//! prefill/decode with KV transfer, and semi-PD (disaggregated compute over
//! unified storage) with an SLO-aware dynamic resource partition controller.
//!
//! The building blocks:
//!
//! - [`sim`]: virtual clock and deterministic event queue.
//! - [`workload`]: Poisson request traces with configurable length
//!   distributions, plus the trace CSV schema.
//! - [`cost`]: the iteration cost model mapping batch work and SM share to
//!   latency.
//! - [`kv`]: the paged KV block pool with atomic allocation.
//! - [`engine`]: the five serving designs over one event-driven state
//!   machine.
//! - [`controller`]: latency-model fitting and the windowed partition
//!   adjustment loop.
//! - [`metrics`]: TTFT/TPOT extraction, percentiles, attainment, goodput.
//! - [`scenario`]: TOML experiment configs, runs, sweeps, and report files.

pub mod controller;
pub mod cost;
pub mod engine;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod workload;

// The guide chapters double as documentation tests so the book's snippets
// stay in sync with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/workloads.md")]
    mod workloads {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/kv-cache.md")]
    mod kv_cache {}
    #[doc = include_str!("../../../book/src/engines.md")]
    mod engines {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
