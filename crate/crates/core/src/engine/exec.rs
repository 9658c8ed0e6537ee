//! Event-driven execution shared by all engine kinds.
//!
//! A single state machine drives all five designs. Unified engines own one
//! execution slot and pick the next batch by phase priority; semi-PD and
//! disaggregated engines run a prefill slot and a decode slot whose
//! iterations overlap in virtual time. Worker "asynchrony" is virtual-time
//! overlap: the machine itself is single-threaded and deterministic.

use std::collections::VecDeque;

use crate::controller::{Controller, ControllerConfig, ControllerLogRow, LatencyModel};
use crate::cost::{self, CostParams, ParallelismConfig, PartitionConfig};
use crate::error::ConfigError;
use crate::kv::{blocks_for_tokens, AllocOutcome, KvPool};
use crate::metrics::SloConfig;
use crate::sim::EventQueue;
use crate::workload::Request;

use super::{
    AuditCounters, EngineConfig, EngineKind, PartitionEvent, PoolSizing, RequestRecord,
    TransferMode,
};

const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Ev {
    Arrive(usize),
    IterDone(Slot),
    TransferDone(usize),
    SwitchRequest(PartitionConfig),
    SwitchPrepared { gen: u64 },
    ControllerTick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    /// The single GPU of a unified engine.
    Shared,
    /// Dedicated prefill worker; pipeline parallelism gives it `pp` stage
    /// slots whose iterations overlap.
    Prefill(usize),
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    NotArrived,
    PrefillWait,
    PrefillRun,
    TransferWait,
    DecodeAllocWait,
    DecodeWait,
    DecodeRun,
    Done,
}

#[derive(Debug)]
struct ReqState {
    orig_id: u64,
    arrival: f64,
    input_len: u32,
    output_len: u32,
    phase: Phase,
    /// Output tokens produced so far; 1 right after the first prefill.
    generated: u32,
    /// Tokens the next prefill pass must compute (input, plus the generated
    /// prefix after a preemption).
    prefix_len: u32,
    /// Tokens currently backed by allocated KV blocks.
    kv_tokens: u32,
    /// Pool index currently holding this request's blocks.
    holds_pool: Option<usize>,
    /// Chunked engine: input tokens already scheduled in chunks.
    chunk_progress: u32,
    first_scheduled: Option<f64>,
    prefill_done: Option<f64>,
    completed: Option<f64>,
    preemptions: u32,
    transfer_delay: f64,
}

impl ReqState {
    fn new(r: &Request) -> Self {
        Self {
            orig_id: r.id,
            arrival: r.arrival,
            input_len: r.input_len,
            output_len: r.output_len,
            phase: Phase::NotArrived,
            generated: 0,
            prefix_len: r.input_len,
            kv_tokens: 0,
            holds_pool: None,
            chunk_progress: 0,
            first_scheduled: None,
            prefill_done: None,
            completed: None,
            preemptions: 0,
            transfer_delay: 0.0,
        }
    }
}

#[derive(Debug)]
struct PrefillEntry {
    idx: usize,
    tokens: u32,
    completes: bool,
}

#[derive(Debug, Default)]
struct Iteration {
    prefill: Vec<PrefillEntry>,
    decode: Vec<usize>,
}

#[derive(Debug)]
struct PendingSwitch {
    part: PartitionConfig,
    ready: f64,
    gen: u64,
    prefill_adopted: bool,
    decode_adopted: bool,
}

/// Results of one simulation run.
#[derive(Debug)]
pub struct SimOutput {
    /// Completed requests in completion order.
    pub records: Vec<RequestRecord>,
    /// High-water utilization per pool: one entry for unified/semi-PD, two
    /// (prefill instance, decode instance) for disaggregated.
    pub pool_high_water: Vec<f64>,
    pub audit: AuditCounters,
    pub partition_trace: Vec<PartitionEvent>,
    pub controller_log: Vec<ControllerLogRow>,
    pub controller_model: Option<LatencyModel>,
    pub final_partition: PartitionConfig,
    pub final_time: f64,
}

pub struct Engine {
    cfg: EngineConfig,
    cost: CostParams,
    par: ParallelismConfig,
    q: EventQueue<Ev>,
    reqs: Vec<ReqState>,
    prefill_wait: VecDeque<usize>,
    decode_wait: VecDeque<usize>,
    decode_running: Vec<usize>,
    decode_alloc_wait: VecDeque<usize>,
    chunk_head: Option<usize>,
    inflight_shared: Option<Iteration>,
    inflight_prefill: Vec<Option<Iteration>>,
    inflight_decode: Option<Iteration>,
    pools: Vec<KvPool>,
    part_target: PartitionConfig,
    worker_x: f64,
    worker_y: f64,
    pending_switch: Option<PendingSwitch>,
    switch_gen: u64,
    stall_until: f64,
    decode_iters: u64,
    controller: Option<Controller>,
    window_ttfts: Vec<f64>,
    window_tpots: Vec<f64>,
    records: Vec<RequestRecord>,
    partition_trace: Vec<PartitionEvent>,
    audit: AuditCounters,
}

impl Engine {
    pub fn new(
        cfg: EngineConfig,
        cost: CostParams,
        par: ParallelismConfig,
        pools: PoolSizing,
        controller: Option<(SloConfig, ControllerConfig)>,
    ) -> Result<Self, ConfigError> {
        cfg.validate()?;
        cost.validate()?;
        par.validate(cfg.kind == EngineKind::Disaggregated)?;
        if cfg.dynamic_partition && controller.is_none() {
            return Err(ConfigError::new(
                "engine.dynamic_partition",
                "dynamic partitioning needs slo and controller sections",
            ));
        }
        let pool_vec = match cfg.kind {
            EngineKind::Disaggregated => vec![
                KvPool::new(pools.block_size, pools.blocks),
                KvPool::new(pools.block_size, pools.decode_blocks.unwrap_or(pools.blocks)),
            ],
            _ => vec![KvPool::new(pools.block_size, pools.blocks)],
        };
        let part = cfg.initial_partition;
        let controller = controller.map(|(slo, ctl)| Controller::new(slo, ctl));
        Ok(Self {
            cfg,
            cost,
            par,
            q: EventQueue::new(),
            reqs: Vec::new(),
            prefill_wait: VecDeque::new(),
            decode_wait: VecDeque::new(),
            decode_running: Vec::new(),
            decode_alloc_wait: VecDeque::new(),
            chunk_head: None,
            inflight_shared: None,
            inflight_prefill: (0..par.pp_prefill).map(|_| None).collect(),
            inflight_decode: None,
            pools: pool_vec,
            part_target: part,
            worker_x: part.x,
            worker_y: part.y,
            pending_switch: None,
            switch_gen: 0,
            stall_until: 0.0,
            decode_iters: 0,
            controller,
            window_ttfts: Vec::new(),
            window_tpots: Vec::new(),
            records: Vec::new(),
            partition_trace: Vec::new(),
            audit: AuditCounters::default(),
        })
    }

    fn prefill_pool(&self) -> usize {
        0
    }

    fn decode_pool(&self) -> usize {
        if self.cfg.kind == EngineKind::Disaggregated {
            1
        } else {
            0
        }
    }

    pub fn run(mut self, trace: &[Request]) -> SimOutput {
        self.reqs = trace.iter().map(ReqState::new).collect();
        for (i, r) in trace.iter().enumerate() {
            self.q.push(r.arrival, Ev::Arrive(i));
        }
        for s in self.cfg.scripted_switches.clone() {
            self.q
                .push(s.at_s, Ev::SwitchRequest(PartitionConfig { x: s.x, y: s.y }));
        }

        while let Some(ev) = self.q.advance() {
            match ev.payload {
                Ev::Arrive(i) => self.on_arrive(i),
                Ev::IterDone(slot) => self.on_iter_done(slot),
                Ev::TransferDone(i) => self.on_transfer_done(i),
                Ev::SwitchRequest(p) => self.request_switch(p),
                Ev::SwitchPrepared { gen } => self.on_switch_prepared(gen),
                Ev::ControllerTick => self.on_controller_tick(),
            }
            self.kick();
        }

        self.audit.unfinished = self
            .reqs
            .iter()
            .filter(|r| r.phase != Phase::Done && r.phase != Phase::NotArrived)
            .count() as u64;
        SimOutput {
            pool_high_water: self.pools.iter().map(|p| p.high_water()).collect(),
            records: self.records,
            audit: self.audit,
            partition_trace: self.partition_trace,
            controller_log: self
                .controller
                .as_ref()
                .map(|c| c.log.clone())
                .unwrap_or_default(),
            controller_model: self.controller.as_ref().map(|c| c.model),
            final_partition: self.part_target,
            final_time: self.q.now(),
        }
    }

    // ---- event handlers -------------------------------------------------

    fn on_arrive(&mut self, idx: usize) {
        self.audit.arrivals += 1;
        self.reqs[idx].phase = Phase::PrefillWait;
        self.prefill_wait.push_back(idx);
    }

    fn on_iter_done(&mut self, slot: Slot) {
        let iter = match slot {
            Slot::Shared => self.inflight_shared.take(),
            Slot::Prefill(i) => self.inflight_prefill[i].take(),
            Slot::Decode => self.inflight_decode.take(),
        }
        .expect("iteration completion without an in-flight batch");
        let now = self.q.now();

        // A finished iteration is a worker boundary: a prepared partition is
        // adopted here even if the worker goes idle afterwards.
        if self.cfg.kind == EngineKind::SemiPd {
            match slot {
                Slot::Prefill(_) => self.adopt_pending(true),
                Slot::Decode => self.adopt_pending(false),
                Slot::Shared => {}
            }
        }

        if !iter.decode.is_empty() {
            self.audit.decode_iterations += 1;
            for &idx in &iter.decode {
                let r = &mut self.reqs[idx];
                r.generated += 1;
                r.kv_tokens += 1;
                if r.generated >= r.output_len {
                    self.complete_request(idx, now);
                }
            }
            if let Some(ctl) = &self.controller {
                self.decode_iters += 1;
                if self.decode_iters.is_multiple_of(ctl.cfg.window_size) {
                    self.q.push(now, Ev::ControllerTick);
                }
            } else {
                self.decode_iters += 1;
            }
        }

        if !iter.prefill.is_empty() {
            self.audit.prefill_iterations += 1;
        }
        for e in iter.prefill {
            if !e.completes {
                continue;
            }
            let r = &mut self.reqs[e.idx];
            if r.prefill_done.is_none() {
                r.prefill_done = Some(now);
                self.window_ttfts.push(now - r.arrival);
            }
            if r.generated == 0 {
                r.generated = 1;
            }
            if r.generated >= r.output_len {
                self.complete_request(e.idx, now);
            } else {
                self.handoff_to_decode(e.idx, now);
            }
        }
    }

    fn on_transfer_done(&mut self, idx: usize) {
        // The prefill-instance copy is dropped once the transfer lands.
        if self.reqs[idx].holds_pool == Some(self.prefill_pool()) {
            self.pools[self.prefill_pool()].release(idx as u64);
            self.reqs[idx].holds_pool = None;
        }
        let blocks = blocks_for_tokens(self.reqs[idx].kv_tokens, self.pools[0].block_size()).max(1);
        let pool = self.decode_pool();
        match self.pools[pool].try_allocate(idx as u64, blocks) {
            AllocOutcome::Granted => {
                self.reqs[idx].holds_pool = Some(pool);
                self.reqs[idx].phase = Phase::DecodeWait;
                self.decode_wait.push_back(idx);
            }
            AllocOutcome::Insufficient => {
                self.note_decode_alloc_failure();
                self.reqs[idx].phase = Phase::DecodeAllocWait;
                self.decode_alloc_wait.push_back(idx);
            }
        }
    }

    fn on_switch_prepared(&mut self, gen: u64) {
        // Stale preparation events from superseded requests are ignored.
        let current = self.pending_switch.as_ref().map(|p| p.gen);
        if current != Some(gen) {
        }
        // Nothing to do directly: workers adopt at their own boundaries.
        // The event exists to wake idle workers at the ready time.
    }

    fn on_controller_tick(&mut self) {
        self.audit.controller_ticks += 1;
        let ttfts = std::mem::take(&mut self.window_ttfts);
        let tpots = std::mem::take(&mut self.window_tpots);
        let current = self.part_target;
        let next = match &mut self.controller {
            Some(c) => c.on_window(self.decode_iters, current, &ttfts, &tpots),
            None => return,
        };
        if next != current {
            self.request_switch(next);
        }
    }

    /// Ask for a new partition. The switch becomes ready after the
    /// preparation delay; each worker adopts it at its own next iteration
    /// boundary. A newer request supersedes a pending one.
    fn request_switch(&mut self, new: PartitionConfig) {
        assert!(
            self.cfg.kind == EngineKind::SemiPd,
            "partition switching is a semi-pd operation"
        );
        self.audit.switch_requests += 1;
        self.switch_gen += 1;
        let ready = self.q.now() + self.cfg.switch_prep_delay_s;
        self.pending_switch = Some(PendingSwitch {
            part: new,
            ready,
            gen: self.switch_gen,
            prefill_adopted: false,
            decode_adopted: false,
        });
        self.part_target = new;
        if self.cfg.naive_switch {
            self.stall_until = ready;
        }
        self.q.push(ready, Ev::SwitchPrepared {
            gen: self.switch_gen,
        });
    }

    fn adopt_pending(&mut self, prefill_worker: bool) {
        let now = self.q.now();
        let Some(p) = &mut self.pending_switch else {
            return;
        };
        if now + EPS < p.ready {
            return;
        }
        let adopted = if prefill_worker {
            &mut p.prefill_adopted
        } else {
            &mut p.decode_adopted
        };
        if !*adopted {
            *adopted = true;
            if prefill_worker {
                self.worker_x = p.part.x;
            } else {
                self.worker_y = p.part.y;
            }
            self.audit.switch_adoptions += 1;
            self.partition_trace.push(PartitionEvent {
                time: now,
                prefill_worker,
                x: self.worker_x,
                y: self.worker_y,
            });
        }
        if p.prefill_adopted && p.decode_adopted {
            self.pending_switch = None;
        }
    }

    // ---- request lifecycle ----------------------------------------------

    fn complete_request(&mut self, idx: usize, now: f64) {
        let r = &mut self.reqs[idx];
        r.phase = Phase::Done;
        r.completed = Some(now);
        if let Some(pool) = r.holds_pool.take() {
            self.pools[pool].release(idx as u64);
        }
        let r = &self.reqs[idx];
        let rec = RequestRecord {
            id: r.orig_id,
            arrival: r.arrival,
            input_len: r.input_len,
            output_len: r.output_len,
            first_scheduled: r.first_scheduled.expect("completed without scheduling"),
            prefill_done: r.prefill_done.expect("completed without prefill"),
            completed: now,
            preemptions: r.preemptions,
            transfer_delay: r.transfer_delay,
        };
        debug_assert!(
            rec.arrival <= rec.first_scheduled + EPS
                && rec.first_scheduled <= rec.prefill_done + EPS
                && rec.prefill_done <= rec.completed + EPS
        );
        if r.output_len >= 2 {
            self.window_tpots
                .push((rec.completed - rec.prefill_done) / f64::from(r.output_len - 1));
        }
        self.records.push(rec);
        self.audit.completed += 1;
    }

    fn handoff_to_decode(&mut self, idx: usize, now: f64) {
        if self.cfg.kind == EngineKind::Disaggregated {
            let delay = self.transfer_delay_for(idx);
            self.reqs[idx].transfer_delay += delay;
            self.reqs[idx].phase = Phase::TransferWait;
            self.audit.transfers += 1;
            self.q.push(now + delay, Ev::TransferDone(idx));
        } else {
            // Shared pool: the handoff is free.
            self.reqs[idx].phase = Phase::DecodeWait;
            self.decode_wait.push_back(idx);
        }
    }

    fn transfer_delay_for(&self, idx: usize) -> f64 {
        match self.cfg.transfer {
            TransferMode::Bandwidth(bw) => {
                f64::from(self.reqs[idx].kv_tokens) * self.cost.kv_bytes_per_token / bw
            }
            TransferMode::OneDecodeIteration =>cost::decode_iter_latency(
                &[self.reqs[idx].kv_tokens],
                &self.cost,
                &self.par,
                100.0,
            ),
        }
    }

    fn note_decode_alloc_failure(&mut self) {
        if self.audit.first_decode_alloc_failure.is_none() {
            self.audit.first_decode_alloc_failure = Some(self.q.now());
        }
    }

    // ---- batch building ---------------------------------------------------

    /// FCFS prefill batch: pop waiting requests whose whole prefix KV
    /// allocates, stopping at the first one that does not fit (no
    /// head-of-line bypass) or at the batch cap.
    fn build_prefill_iteration(&mut self) -> Option<Iteration> {
        let pool = self.prefill_pool();
        let block = self.pools[pool].block_size();
        let now = self.q.now();
        let mut entries = Vec::new();
        while entries.len() < self.cfg.max_batch_size {
            let Some(&idx) = self.prefill_wait.front() else {
                break;
            };
            let blocks = blocks_for_tokens(self.reqs[idx].prefix_len, block).max(1);
            match self.pools[pool].try_allocate(idx as u64, blocks) {
                AllocOutcome::Granted => {
                    self.prefill_wait.pop_front();
                    let r = &mut self.reqs[idx];
                    r.holds_pool = Some(pool);
                    r.kv_tokens = r.prefix_len;
                    r.phase = Phase::PrefillRun;
                    if r.first_scheduled.is_none() {
                        r.first_scheduled = Some(now);
                    }
                    entries.push(PrefillEntry {
                        idx,
                        tokens: r.prefix_len,
                        completes: true,
                    });
                }
                AllocOutcome::Insufficient => break,
            }
        }
        (!entries.is_empty()).then(|| Iteration {
            prefill: entries,
            decode: Vec::new(),
        })
    }

    /// Continuous-batching decode step: survivors plus newly waiting
    /// requests up to the cap, with one block allocated per sequence at
    /// each block-boundary crossing. Exhaustion triggers the preemption
    /// policy (evict the most recently arrived running request for full
    /// recompute) or stalls the victim when preemption is off.
    fn build_decode_iteration(&mut self) -> Option<Iteration> {
        self.build_decode_iteration_capped(self.cfg.max_batch_size)
    }

    /// Decode batch capped at `cap` sequences (the chunked engine's token
    /// budget caps below max_batch_size). Block growth is charged only for
    /// sequences that actually run this iteration.
    fn build_decode_iteration_capped(&mut self, cap: usize) -> Option<Iteration> {
        let cap = cap.min(self.cfg.max_batch_size);
        if self.cfg.kind == EngineKind::Disaggregated {
            self.retry_decode_alloc_wait();
        }
        while self.decode_running.len() < self.cfg.max_batch_size {
            let Some(idx) = self.decode_wait.pop_front() else {
                break;
            };
            self.reqs[idx].phase = Phase::DecodeRun;
            self.decode_running.push(idx);
        }
        if self.decode_running.is_empty() {
            return None;
        }

        let pool = self.decode_pool();
        let block = self.pools[pool].block_size();
        let mut batch: Vec<usize> = Vec::new();
        let candidates = self.decode_running.clone();
        for idx in candidates {
            if batch.len() >= cap {
                break;
            }
            if self.reqs[idx].phase != Phase::DecodeRun {
                continue; // evicted earlier in this build
            }
            let kv = self.reqs[idx].kv_tokens;
            let needs_block = blocks_for_tokens(kv + 1, block) > blocks_for_tokens(kv, block);
            if !needs_block {
                batch.push(idx);
                continue;
            }
            let mut scheduled = false;
            loop {
                match self.pools[pool].try_allocate(idx as u64, 1) {
                    AllocOutcome::Granted => {
                        scheduled = true;
                        break;
                    }
                    AllocOutcome::Insufficient => {
                        self.note_decode_alloc_failure();
                        if !self.cfg.preemption {
                            self.audit.decode_stalls += 1;
                            break;
                        }
                        let Some(victim) = self.pick_preemption_victim(idx) else {
                            // Last running sequence: nothing to evict, stall.
                            self.audit.decode_stalls += 1;
                            break;
                        };
                        let self_evicted = victim == idx;
                        self.preempt(victim);
                        if self_evicted {
                            break;
                        }
                    }
                }
            }
            if scheduled && self.reqs[idx].phase == Phase::DecodeRun {
                batch.push(idx);
            }
        }
        self.decode_running
            .retain(|&idx| self.reqs[idx].phase == Phase::DecodeRun);
        // A later eviction may have removed an earlier batch member.
        batch.retain(|&idx| self.reqs[idx].phase == Phase::DecodeRun);
        (!batch.is_empty()).then(|| Iteration {
            prefill: Vec::new(),
            decode: batch,
        })
    }

    /// Most recently arrived running request, or None when fewer than two
    /// are running (evicting the lone sequence could never help it).
    fn pick_preemption_victim(&self, _for_idx: usize) -> Option<usize> {
        let running: Vec<usize> = self
            .decode_running
            .iter()
            .copied()
            .filter(|&i| self.reqs[i].phase == Phase::DecodeRun)
            .collect();
        if running.len() < 2 {
            return None;
        }
        running.into_iter().max_by(|&a, &b| {
            self.reqs[a]
                .arrival
                .partial_cmp(&self.reqs[b].arrival)
                .unwrap()
                .then(self.reqs[a].orig_id.cmp(&self.reqs[b].orig_id))
        })
    }

    /// Evict a running decode request: free its blocks and send it back to
    /// the prefill queue for a full recompute of input plus generated
    /// prefix. Its first-token time is not reset, so the recompute inflates
    /// its TPOT.
    fn preempt(&mut self, idx: usize) {
        let r = &mut self.reqs[idx];
        debug_assert_eq!(r.phase, Phase::DecodeRun);
        if let Some(pool) = r.holds_pool.take() {
            self.pools[pool].release(idx as u64);
        }
        r.phase = Phase::PrefillWait;
        r.prefix_len = r.input_len + r.generated;
        r.kv_tokens = 0;
        r.chunk_progress = 0;
        r.preemptions += 1;
        self.audit.preemptions += 1;
        // Re-enter the prefill queue in arrival order.
        let key = (self.reqs[idx].arrival, self.reqs[idx].orig_id);
        let pos = self
            .prefill_wait
            .iter()
            .position(|&j| (self.reqs[j].arrival, self.reqs[j].orig_id) > key)
            .unwrap_or(self.prefill_wait.len());
        self.prefill_wait.insert(pos, idx);
    }

    fn retry_decode_alloc_wait(&mut self) {
        let pool = self.decode_pool();
        let block = self.pools[pool].block_size();
        while let Some(&idx) = self.decode_alloc_wait.front() {
            let blocks = blocks_for_tokens(self.reqs[idx].kv_tokens, block).max(1);
            match self.pools[pool].try_allocate(idx as u64, blocks) {
                AllocOutcome::Granted => {
                    self.decode_alloc_wait.pop_front();
                    self.reqs[idx].holds_pool = Some(pool);
                    self.reqs[idx].phase = Phase::DecodeWait;
                    self.decode_wait.push_back(idx);
                }
                AllocOutcome::Insufficient => break,
            }
        }
    }

    /// Chunked engine: fill a token budget with decode sequences first,
    /// then one chunk of the head-of-line prefill request.
    fn build_chunked_iteration(&mut self) -> Option<Iteration> {
        let mut budget = self.cfg.chunk_size as usize;

        let decode_part = match self.build_decode_iteration_capped(budget) {
            Some(it) => {
                budget -= it.decode.len();
                it.decode
            }
            None => Vec::new(),
        };

        let mut prefill_part = Vec::new();
        if budget > 0 {
            if self.chunk_head.is_none() {
                if let Some(&idx) = self.prefill_wait.front() {
                    // Whole-input allocation happens at the first chunk.
                    let pool = self.prefill_pool();
                    let blocks = blocks_for_tokens(
                        self.reqs[idx].prefix_len,
                        self.pools[pool].block_size(),
                    )
                    .max(1);
                    if self.pools[pool].try_allocate(idx as u64, blocks) == AllocOutcome::Granted {
                        self.prefill_wait.pop_front();
                        let now = self.q.now();
                        let r = &mut self.reqs[idx];
                        r.holds_pool = Some(pool);
                        r.kv_tokens = r.prefix_len;
                        r.phase = Phase::PrefillRun;
                        r.chunk_progress = 0;
                        if r.first_scheduled.is_none() {
                            r.first_scheduled = Some(now);
                        }
                        self.chunk_head = Some(idx);
                    }
                }
            }
            if let Some(idx) = self.chunk_head {
                let r = &mut self.reqs[idx];
                let remaining = r.prefix_len - r.chunk_progress;
                let tokens = remaining.min(budget as u32);
                if tokens > 0 {
                    r.chunk_progress += tokens;
                    let completes = r.chunk_progress >= r.prefix_len;
                    if completes {
                        self.chunk_head = None;
                    }
                    prefill_part.push(PrefillEntry {
                        idx,
                        tokens,
                        completes,
                    });
                }
            }
        }

        if decode_part.is_empty() && prefill_part.is_empty() {
            return None;
        }
        Some(Iteration {
            prefill: prefill_part,
            decode: decode_part,
        })
    }

    // ---- scheduling -------------------------------------------------------

    fn prefill_worker_busy(&self) -> bool {
        self.inflight_prefill.iter().any(|s| s.is_some())
    }

    fn free_prefill_slot(&self) -> Option<usize> {
        self.inflight_prefill.iter().position(|s| s.is_none())
    }

    fn iteration_l100(&self, it: &Iteration) -> f64 {
        let mut l = 0.0;
        if !it.prefill.is_empty() {
            let tokens: Vec<u32> = it.prefill.iter().map(|e| e.tokens).collect();
            l += cost::prefill_l100(&tokens, &self.cost, &self.par);
        }
        if !it.decode.is_empty() {
            let kvs: Vec<u32> = it.decode.iter().map(|&i| self.reqs[i].kv_tokens).collect();
            l += cost::decode_l100(&kvs, &self.cost, &self.par);
        }
        l
    }

    fn start_iteration(&mut self, slot: Slot, it: Iteration, share: f64) {
        let latency = cost::scaled_latency(self.iteration_l100(&it), share);
        let done = self.q.now() + latency;
        match slot {
            Slot::Shared => self.inflight_shared = Some(it),
            Slot::Prefill(i) => self.inflight_prefill[i] = Some(it),
            Slot::Decode => self.inflight_decode = Some(it),
        }
        self.q.push(done, Ev::IterDone(slot));
    }

    fn kick(&mut self) {
        match self.cfg.kind {
            EngineKind::UnifiedPrefillFirst => {
                if self.inflight_shared.is_none() {
                    if let Some(it) = self.build_prefill_iteration() {
                        self.start_iteration(Slot::Shared, it, 100.0);
                    } else if let Some(it) = self.build_decode_iteration() {
                        self.start_iteration(Slot::Shared, it, 100.0);
                    }
                }
            }
            EngineKind::UnifiedDecodeFirst => {
                if self.inflight_shared.is_none() {
                    if let Some(it) = self.build_decode_iteration() {
                        self.start_iteration(Slot::Shared, it, 100.0);
                    } else if let Some(it) = self.build_prefill_iteration() {
                        self.start_iteration(Slot::Shared, it, 100.0);
                    }
                }
            }
            EngineKind::UnifiedChunked => {
                if self.inflight_shared.is_none() {
                    if let Some(it) = self.build_chunked_iteration() {
                        self.start_iteration(Slot::Shared, it, 100.0);
                    }
                }
            }
            EngineKind::Disaggregated => {
                while let Some(slot) = self.free_prefill_slot() {
                    match self.build_prefill_iteration() {
                        Some(it) => self.start_iteration(Slot::Prefill(slot), it, 100.0),
                        None => break,
                    }
                }
                if self.inflight_decode.is_none() {
                    if let Some(it) = self.build_decode_iteration() {
                        self.start_iteration(Slot::Decode, it, 100.0);
                    }
                }
            }
            EngineKind::SemiPd => self.kick_semi_pd(),
        }
    }

    fn kick_semi_pd(&mut self) {
        if self.q.now() + EPS < self.stall_until {
            return;
        }
        let mut pre_its = Vec::new();
        while let Some(slot) = self.free_prefill_slot() {
            match self.build_prefill_iteration() {
                Some(it) => {
                    // Reserve the slot so the loop advances.
                    self.inflight_prefill[slot] = Some(Iteration::default());
                    pre_its.push((slot, it));
                }
                None => break,
            }
        }
        let dec_it = if self.inflight_decode.is_none() {
            self.build_decode_iteration()
        } else {
            None
        };

        let prefill_active = self.prefill_worker_busy() || !pre_its.is_empty();
        let decode_active = self.inflight_decode.is_some() || dec_it.is_some();

        for (slot, it) in pre_its {
            self.adopt_pending(true);
            // An MPS share is a cap: a lone worker still only gets its own
            // percentage; competition rescales when the pair oversubscribes.
            let share = if decode_active {
                cost::effective_shares(PartitionConfig {
                    x: self.worker_x,
                    y: self.worker_y,
                })
                .0
            } else {
                self.worker_x
            };
            self.inflight_prefill[slot] = None;
            self.start_iteration(Slot::Prefill(slot), it, share);
        }
        if let Some(it) = dec_it {
            self.adopt_pending(false);
            let share = if prefill_active {
                cost::effective_shares(PartitionConfig {
                    x: self.worker_x,
                    y: self.worker_y,
                })
                .1
            } else {
                self.worker_y
            };
            self.start_iteration(Slot::Decode, it, share);
        }
    }
}
