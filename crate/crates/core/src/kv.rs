//! Unified paged KV-cache pool shared by the prefill and decode workers.
//!
//! Allocation is the three-step query/get/update sequence executed as one
//! indivisible operation: the pool's bookkeeping is locked until the update
//! finishes, so two workers allocating concurrently can never both observe
//! the same free count and oversubscribe the pool (the write-after-read
//! conflict is impossible by construction).

use std::collections::BTreeMap;
use std::sync::Mutex;

/// Outcome of an allocation attempt. Running out of blocks is a normal
/// serving condition, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocOutcome {
    Granted,
    Insufficient,
}

#[derive(Debug)]
struct PoolState {
    free: u64,
    allocations: BTreeMap<u64, u64>,
    high_water: f64,
}

/// Paged block pool with atomic allocation and utilization accounting.
#[derive(Debug)]
pub struct KvPool {
    block_size: u32,
    capacity: u64,
    state: Mutex<PoolState>,
}

impl KvPool {
    pub fn new(block_size: u32, capacity: u64) -> Self {
        assert!(block_size > 0, "block_size must be > 0");
        Self {
            block_size,
            capacity,
            state: Mutex::new(PoolState {
                free: capacity,
                allocations: BTreeMap::new(),
                high_water: 0.0,
            }),
        }
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn free_blocks(&self) -> u64 {
        self.state.lock().unwrap().free
    }

    /// Blocks currently held by `req`, if any.
    pub fn allocated_to(&self, req: u64) -> Option<u64> {
        self.state.lock().unwrap().allocations.get(&req).copied()
    }

    /// Atomically reserve `n` blocks for `req`. On `Insufficient` the pool
    /// is left untouched. Requesting zero blocks is a caller bug.
    pub fn try_allocate(&self, req: u64, n: u64) -> AllocOutcome {
        assert!(n >= 1, "allocation of zero blocks is a contract violation");
        let mut s = self.state.lock().unwrap();
        if s.free < n {
            return AllocOutcome::Insufficient;
        }
        s.free -= n;
        *s.allocations.entry(req).or_insert(0) += n;
        let util = (self.capacity - s.free) as f64 / self.capacity.max(1) as f64;
        if util > s.high_water {
            s.high_water = util;
        }
        AllocOutcome::Granted
    }

    /// Release every block held by `req` and return how many were freed.
    /// Releasing an unknown request id signals an engine bookkeeping bug.
    pub fn release(&self, req: u64) -> u64 {
        let mut s = self.state.lock().unwrap();
        let n = s
            .allocations
            .remove(&req)
            .unwrap_or_else(|| panic!("release of unknown request {req}"));
        s.free += n;
        debug_assert!(s.free <= self.capacity);
        n
    }

    /// Fraction of the pool in use, in [0, 1]. Also refreshes the high-water
    /// mark.
    pub fn utilization(&self) -> f64 {
        let mut s = self.state.lock().unwrap();
        let util = (self.capacity - s.free) as f64 / self.capacity.max(1) as f64;
        if util > s.high_water {
            s.high_water = util;
        }
        util
    }

    /// Maximum utilization observed so far in this run.
    pub fn high_water(&self) -> f64 {
        self.state.lock().unwrap().high_water
    }

    /// Snapshot of (free, allocations) for oracle checks.
    pub fn snapshot(&self) -> (u64, BTreeMap<u64, u64>) {
        let s = self.state.lock().unwrap();
        (s.free, s.allocations.clone())
    }
}

/// Blocks needed to hold `tokens` tokens at the given block size.
pub fn blocks_for_tokens(tokens: u32, block_size: u32) -> u64 {
    assert!(block_size > 0, "block_size must be > 0");
    u64::from(tokens.div_ceil(block_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rounding() {
        assert_eq!(blocks_for_tokens(251, 16), 16);
        assert_eq!(blocks_for_tokens(256, 16), 16);
        assert_eq!(blocks_for_tokens(0, 16), 0);
        assert_eq!(blocks_for_tokens(1, 16), 1);
    }

    #[test]
    fn capacity_constraint_under_contention() {
        // Two callers racing for 6 of 10 blocks: exactly one wins.
        let pool = KvPool::new(16, 10);
        let a = pool.try_allocate(1, 6);
        let b = pool.try_allocate(2, 6);
        let granted = [a, b]
            .iter()
            .filter(|&&o| o == AllocOutcome::Granted)
            .count();
        assert_eq!(granted, 1);
        assert_eq!(pool.free_blocks(), 4);
    }

    #[test]
    #[should_panic(expected = "zero blocks")]
    fn zero_block_request_is_contract_violation() {
        let pool = KvPool::new(16, 10);
        pool.try_allocate(1, 0);
    }

    #[test]
    fn conservation_over_grant_release_cycle() {
        let pool = KvPool::new(16, 10);
        assert_eq!(pool.try_allocate(1, 4), AllocOutcome::Granted);
        assert_eq!(pool.release(1), 4);
        assert_eq!(pool.try_allocate(2, 10), AllocOutcome::Granted);
        assert_eq!(pool.free_blocks(), 0);
    }

    #[test]
    fn release_frees_exact_count() {
        let pool = KvPool::new(16, 7);
        assert_eq!(pool.try_allocate(9, 5), AllocOutcome::Granted);
        assert_eq!(pool.free_blocks(), 2);
        assert_eq!(pool.release(9), 5);
        assert_eq!(pool.free_blocks(), 7);
    }

    #[test]
    #[should_panic(expected = "unknown request")]
    fn double_release_panics() {
        let pool = KvPool::new(16, 7);
        pool.try_allocate(1, 2);
        pool.release(1);
        pool.release(1);
    }

    #[test]
    fn release_after_growth_frees_total() {
        let pool = KvPool::new(16, 10);
        pool.try_allocate(1, 5);
        pool.try_allocate(1, 2);
        assert_eq!(pool.release(1), 7);
        assert_eq!(pool.free_blocks(), 10);
    }

    #[test]
    fn utilization_and_high_water() {
        let pool = KvPool::new(16, 100);
        assert_eq!(pool.utilization(), 0.0);
        pool.try_allocate(1, 75);
        assert!((pool.utilization() - 0.75).abs() < 1e-12);
        pool.release(1);
        assert_eq!(pool.utilization(), 0.0);
        // High water holds the peak.
        assert!((pool.high_water() - 0.75).abs() < 1e-12);
    }

    /// Reference model for the sequential-equivalence oracle.
    #[derive(Default)]
    struct SeqModel {
        free: i64,
        allocs: std::collections::BTreeMap<u64, u64>,
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc { req: u64, n: u64 },
        Release { req: u64 },
    }

    fn op_strategy(actors: u64) -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..actors, 1u64..8).prop_map(|(req, n)| Op::Alloc { req, n }),
            (0..actors).prop_map(|req| Op::Release { req }),
        ]
    }

    proptest! {
        /// Randomized interleavings of two allocator actors: conservation
        /// holds after every step and the final pool state matches a
        /// sequential replay of the same linearized operation order.
        #[test]
        fn interleavings_match_sequential_replay(
            ops in proptest::collection::vec(op_strategy(2), 1..200)
        ) {
            let capacity = 24u64;
            let pool = KvPool::new(16, capacity);
            let mut model = SeqModel { free: capacity as i64, allocs: Default::default() };

            for op in &ops {
                match *op {
                    Op::Alloc { req, n } => {
                        let got = pool.try_allocate(req, n);
                        // Replay against the sequential model: same decision.
                        let expect = if model.free >= n as i64 {
                            model.free -= n as i64;
                            *model.allocs.entry(req).or_insert(0) += n;
                            AllocOutcome::Granted
                        } else {
                            AllocOutcome::Insufficient
                        };
                        prop_assert_eq!(got, expect);
                    }
                    Op::Release { req } => {
                        if model.allocs.contains_key(&req) {
                            let freed = pool.release(req);
                            let expect = model.allocs.remove(&req).unwrap();
                            model.free += expect as i64;
                            prop_assert_eq!(freed, expect);
                        }
                    }
                }
                let (free, allocs) = pool.snapshot();
                let held: u64 = allocs.values().sum();
                prop_assert_eq!(free + held, capacity, "conservation violated");
            }
            let (free, allocs) = pool.snapshot();
            prop_assert_eq!(free as i64, model.free);
            prop_assert_eq!(allocs, model.allocs);
        }
    }
}
