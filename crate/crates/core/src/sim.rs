//! Deterministic discrete-event core: a virtual clock plus a time-ordered
//! event queue that every engine schedules against.
//!
//! Events dispatch in nondecreasing time order; events at equal times
//! dispatch in the order they were pushed (a per-run sequence number breaks
//! ties). Replaying the same schedule therefore yields an identical trace.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// One scheduled event: a virtual timestamp, an insertion sequence number,
/// and an engine-defined payload.
#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub time: f64,
    pub seq: u64,
    pub payload: P,
}

struct HeapEntry<P>(SimEvent<P>);

impl<P> PartialEq for HeapEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.time == other.0.time && self.0.seq == other.0.seq
    }
}
impl<P> Eq for HeapEntry<P> {}

impl<P> PartialOrd for HeapEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for HeapEntry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse both keys for (time, seq) min order.
        // Times are finite by the push contract, so partial_cmp cannot fail.
        other
            .0
            .time
            .partial_cmp(&self.0.time)
            .unwrap_or(Ordering::Equal)
            .then(other.0.seq.cmp(&self.0.seq))
    }
}

/// Event queue with an embedded virtual clock.
///
/// The clock starts at 0.0 and only moves forward, to the timestamp of each
/// dispatched event. Scheduling into the past is an engine bug and panics.
pub struct EventQueue<P> {
    heap: BinaryHeap<HeapEntry<P>>,
    now: f64,
    next_seq: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: 0.0,
            next_seq: 0,
        }
    }

    /// Current virtual time in seconds.
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedule `payload` at absolute virtual time `time`.
    ///
    /// Panics if `time` is in the past or not finite: an event source that
    /// schedules behind the clock has already corrupted the run.
    pub fn push(&mut self, time: f64, payload: P) -> u64 {
        assert!(
            time.is_finite(),
            "scheduled time must be finite, got {time}"
        );
        assert!(
            time >= self.now,
            "scheduling into the past: t={time} < now={}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(HeapEntry(SimEvent { time, seq, payload }));
        seq
    }

    /// Pop the earliest event and advance the clock to its timestamp.
    /// Returns `None` when the queue is empty (end of simulation).
    pub fn advance(&mut self) -> Option<SimEvent<P>> {
        let entry = self.heap.pop()?;
        self.now = entry.0.time;
        Some(entry.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_order() {
        let mut q = EventQueue::new();
        q.push(1.0, "late");
        q.push(0.5, "early");
        assert_eq!(q.advance().unwrap().payload, "early");
        assert_eq!(q.advance().unwrap().payload, "late");
    }

    #[test]
    fn equal_times_pop_in_push_order() {
        let mut q = EventQueue::new();
        let s0 = q.push(2.0, "first");
        let s1 = q.push(2.0, "second");
        assert!(s0 < s1);
        assert_eq!(q.advance().unwrap().payload, "first");
        assert_eq!(q.advance().unwrap().payload, "second");
    }

    #[test]
    #[should_panic(expected = "scheduling into the past")]
    fn rejects_past_events() {
        let mut q = EventQueue::new();
        q.push(3.0, ());
        q.advance();
        q.push(3.0 - 1e-9, ());
    }

    #[test]
    fn empty_queue_ends_simulation() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert!(q.advance().is_none());
    }

    #[test]
    fn clock_jumps_to_event_time() {
        let mut q = EventQueue::new();
        q.push(3.0, ());
        assert_eq!(q.now(), 0.0);
        q.advance();
        assert_eq!(q.now(), 3.0);
    }

    #[test]
    fn interleaved_producers_still_ordered() {
        let mut q = EventQueue::new();
        q.push(4.0, "a");
        q.push(2.0, "b");
        assert_eq!(q.advance().unwrap().payload, "b");
        assert_eq!(q.advance().unwrap().payload, "a");
    }

    #[test]
    fn dispatch_is_stable_sort_by_time_then_seq() {
        // Mixed schedule with duplicate timestamps; the dispatched order must
        // equal a stable sort of the pushed (time, seq) pairs.
        let times = [5.0, 1.0, 3.0, 1.0, 5.0, 3.0, 3.0, 0.0];
        let mut q = EventQueue::new();
        let mut pushed: Vec<(f64, u64)> = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            let seq = q.push(t, i);
            pushed.push((t, seq));
        }
        pushed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        let mut got = Vec::new();
        while let Some(ev) = q.advance() {
            got.push((ev.time, ev.seq));
        }
        assert_eq!(got, pushed);
    }
}
