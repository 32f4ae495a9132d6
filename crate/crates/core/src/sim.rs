//! Discrete-event core: integer-microsecond clock, FIFO-stable event queue and
//! seeded random streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Simulated time in whole microseconds since the start of a run.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_us(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds a fractional microsecond value to the nearest tick. Negative and
    /// NaN inputs collapse to zero.
    pub fn from_us_f64(us: f64) -> Self {
        if us.is_nan() || us <= 0.0 {
            SimTime(0)
        } else {
            SimTime(us.round() as u64)
        }
    }

    pub const fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Handle returned by [`EventQueue::schedule`]; it is the insertion sequence
/// number and therefore unique per queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

struct Entry<E> {
    fire_at: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Ordered event queue with an embedded clock.
///
/// Events with equal `fire_at` are delivered in scheduling order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    now: SimTime,
    next_seq: u64,
    delivered: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            delivered: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn scheduled(&self) -> u64 {
        self.next_seq
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventId, SimError> {
        if fire_at < self.now {
            return Err(SimError::ScheduleInPast {
                now: self.now.0,
                fire_at: fire_at.0,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_at,
            seq,
            payload,
        });
        Ok(EventId(seq))
    }

    /// Schedules `delay` after the current clock; cannot fail.
    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            fire_at: self.now + delay,
            seq,
            payload,
        });
        EventId(seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Pops the next event if it fires at or before `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<(SimTime, EventId, E)> {
        if self.heap.peek()?.fire_at > limit {
            return None;
        }
        let e = self.heap.pop()?;
        self.now = e.fire_at;
        self.delivered += 1;
        Some((e.fire_at, EventId(e.seq), e.payload))
    }

    pub fn pop(&mut self) -> Option<(SimTime, EventId, E)> {
        self.pop_until(SimTime::MAX)
    }

    /// Delivers every event with `fire_at <= t` to `handler`, which may schedule
    /// more. Returns the number delivered. The clock ends at `t` when the queue
    /// drains early, otherwise at the time of the last delivered event.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut EventQueue<E>, SimTime, E),
    {
        let mut count = 0;
        while let Some((at, _, ev)) = self.pop_until(t) {
            handler(self, at, ev);
            count += 1;
        }
        if self.now < t && (self.heap.is_empty() || t != SimTime::MAX) {
            self.now = t;
        }
        count
    }

    /// Advances the clock without delivering anything. Used when a caller
    /// drains events itself.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

/// Independent, seeded random streams. Each consumer owns its own stream so
/// that, e.g., changing the I/O scheduler does not perturb the workload's
/// tab-footprint or switch-target draws.
///
/// The generator is ChaCha8 (`rand_chacha`), seeded with the scenario seed and
/// separated by ChaCha stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Workload = 1,
    Device = 2,
    Compression = 3,
    Test = 99,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(q: &mut EventQueue<u32>) -> Vec<u32> {
        let mut out = Vec::new();
        q.run_until(SimTime::MAX, |_, _, e| out.push(e));
        out
    }

    #[test]
    fn schedule_at_now_is_delivered_first() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(0), 7).unwrap();
        q.schedule(SimTime(1), 8).unwrap();
        assert_eq!(q.pop().map(|e| e.2), Some(7));
    }

    #[test]
    fn equal_timestamps_are_fifo() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), 1).unwrap();
        q.schedule(SimTime(5), 2).unwrap();
        assert_eq!(drain(&mut q), vec![1, 2]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), 1).unwrap();
        q.pop();
        let err = q.schedule(SimTime(3), 2).unwrap_err();
        assert!(matches!(
            err,
            SimError::ScheduleInPast {
                now: 10,
                fire_at: 3
            }
        ));
    }

    // Oracle: stable sort by time over every permutation of up to five events.
    #[test]
    fn delivery_matches_stable_sort_over_permutations() {
        fn permutations(items: &[u64]) -> Vec<Vec<u64>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let head = rest.remove(i);
                for mut p in permutations(&rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }
        for times in [vec![3, 1, 2], vec![4, 4, 1, 0, 4], vec![2, 2, 2, 1]] {
            for perm in permutations(&times) {
                let mut q = EventQueue::new();
                for (i, t) in perm.iter().enumerate() {
                    q.schedule(SimTime(*t), i as u32).unwrap();
                }
                let mut expected: Vec<(u64, u32)> = perm
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (*t, i as u32))
                    .collect();
                expected.sort_by_key(|&(t, _)| t);
                let expected: Vec<u32> = expected.into_iter().map(|(_, i)| i).collect();
                assert_eq!(drain(&mut q), expected, "perm {perm:?}");
            }
        }
    }

    #[test]
    fn run_until_on_empty_queue_advances_clock() {
        let mut q: EventQueue<u32> = EventQueue::new();
        assert_eq!(q.run_until(SimTime(100), |_, _, _| {}), 0);
        assert_eq!(q.now(), SimTime(100));
    }

    #[test]
    fn run_until_counts_events_up_to_limit() {
        let mut q = EventQueue::new();
        for t in [10, 20, 30, 40] {
            q.schedule(SimTime(t), t as u32).unwrap();
        }
        assert_eq!(q.run_until(SimTime(30), |_, _, _| {}), 3);
        assert_eq!(q.now(), SimTime(30));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn chained_events_are_counted() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(0), 0u32).unwrap();
        let n = q.run_until(SimTime(1_000), |q, _, link| {
            if link < 9 {
                q.schedule_in(SimTime(7), link + 1);
            }
        });
        assert_eq!(n, 10);
        assert_eq!(q.scheduled(), q.delivered() + q.len() as u64);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        use rand::RngCore;
        let draw = |stream| {
            let mut r = rng_for(1, stream);
            (0..4).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        assert_eq!(draw(Stream::Device), draw(Stream::Device));
        assert_ne!(draw(Stream::Device), draw(Stream::Workload));
    }
}
