//! Discrete-event scheduler.
//!
//! Events are ordered by `(fire_at, seq)`. `seq` is issued at scheduling
//! time, so events that share a timestamp come out in FIFO order. Timestamps
//! are compared exactly; there is no tolerance anywhere in the ordering.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

use thiserror::Error;

/// Simulated time in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics if `secs` is negative or not finite.
    pub fn from_secs(secs: f64) -> Self {
        assert!(
            secs.is_finite() && secs >= 0.0,
            "SimTime must be finite and non-negative, got {secs}"
        );
        SimTime(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn plus(self, secs: f64) -> SimTime {
        SimTime::from_secs(self.0 + secs)
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}", self.0)
    }
}

/// Handle returned by [`Scheduler::schedule`]; used to cancel the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("event scheduled in the past: fire_at={fire_at} < now={now}")]
    ScheduledInPast { fire_at: SimTime, now: SimTime },
}

/// An event popped from the queue.
#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct Queued<P> {
    fire_at: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; reverse so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct Scheduler<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Queued<P>>,
    pending: HashSet<u64>,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            pending: HashSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: P) -> Result<EventHandle, EngineError> {
        if fire_at < self.now {
            return Err(EngineError::ScheduledInPast {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued {
            fire_at,
            seq,
            payload,
        });
        self.pending.insert(seq);
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` seconds from now.
    pub fn schedule_in(&mut self, delay: f64, payload: P) -> Result<EventHandle, EngineError> {
        let at = self.now.plus(delay);
        self.schedule(at, payload)
    }

    /// Returns true if the event was still pending. It will never fire.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&handle.0)
    }

    /// Pops the next live event with `fire_at <= t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<P>> {
        loop {
            let top = self.heap.peek()?;
            if top.fire_at > t_end {
                return None;
            }
            let q = self.heap.pop().expect("peeked");
            if !self.pending.remove(&q.seq) {
                continue;
            }
            self.now = q.fire_at;
            return Some(Event {
                fire_at: q.fire_at,
                seq: q.seq,
                payload: q.payload,
            });
        }
    }

    /// Sets the clock to `t_end` once all earlier events are drained.
    pub fn advance_to(&mut self, t_end: SimTime) {
        if t_end > self.now {
            self.now = t_end;
        }
    }

    /// Processes every event with `fire_at <= t_end` in `(fire_at, seq)` order.
    /// Events scheduled by the handler inside the window are processed too.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Event<P>),
    {
        assert!(t_end >= self.now, "run_until into the past");
        let mut processed = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            processed += 1;
        }
        self.advance_to(t_end);
        processed
    }
}
