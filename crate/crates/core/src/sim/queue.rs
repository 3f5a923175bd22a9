//! Time-ordered event queue with a sequence tie-break.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use super::SimError;

/// Handle of a scheduled event, usable for cancellation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct EventQueue<E> {
    now: f64,
    next_seq: u64,
    heap: BinaryHeap<Entry<E>>,
    cancelled: BTreeSet<u64>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: 0.0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN times are rejected
    pub fn schedule(&mut self, time: f64, event: E) -> Result<EventHandle, SimError> {
        if !(time >= self.now) {
            return Err(SimError::Causality {
                at: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, event });
        Ok(EventHandle(seq))
    }

    /// Returns false if the event already ran or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.heap.iter().any(|e| e.seq == handle.0) {
            self.cancelled.insert(handle.0)
        } else {
            false
        }
    }

    /// Time of the next live event.
    pub fn peek_time(&mut self) -> Option<f64> {
        self.skip_cancelled();
        self.heap.peek().map(|e| e.time)
    }

    /// Removes the next event with `time <= until` and advances the clock.
    pub fn pop_until(&mut self, until: f64) -> Option<(f64, EventHandle, E)> {
        self.skip_cancelled();
        if self.heap.peek()?.time > until {
            return None;
        }
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, EventHandle(e.seq), e.event))
    }

    /// Moves the clock forward without running anything.
    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    fn skip_cancelled(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.cancelled.remove(&top.seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }
}
