//! Discrete-event engine: integer microsecond clock, a deterministic event
//! queue and named random streams.
//!
//! Events that share a fire time are delivered in insertion order, so a run is
//! a pure function of its inputs. Randomness comes from ChaCha8 streams derived
//! from `(seed, stream_id)`; nothing depends on the platform RNG or on hash-map
//! iteration order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time (or a duration) in whole microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative inputs saturate at zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Scales by a non-negative factor, rounding to the nearest microsecond.
    pub fn mul_f64(self, f: f64) -> SimTime {
        SimTime((self.0 as f64 * f).round().max(0.0) as u64)
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    /// Time needed to push `bytes` through a pipe of `rate_bps`, rounded up.
    pub fn transmission(bytes: usize, rate_bps: f64) -> SimTime {
        debug_assert!(rate_bps > 0.0);
        SimTime(((bytes as f64 * 8.0 * 1e6) / rate_bps).ceil() as u64)
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
        SimTime(self.0.checked_sub(rhs.0).expect("SimTime underflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past: fire time {fire} < clock {now}")]
    ScheduledInPast { fire: SimTime, now: SimTime },
    #[error("handler failed on event {kind} at {time}: {reason}")]
    Handler {
        kind: String,
        time: SimTime,
        reason: String,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Handle returned by [`Scheduler::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// A queued event.
#[derive(Debug)]
pub struct Event<K> {
    pub fire_time: SimTime,
    pub insertion_index: u64,
    pub kind: K,
}

impl<K> PartialEq for Event<K> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.insertion_index == other.insertion_index
    }
}

impl<K> Eq for Event<K> {}

impl<K> Ord for Event<K> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event on top.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_time, other.insertion_index).cmp(&(self.fire_time, self.insertion_index))
    }
}

impl<K> PartialOrd for Event<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Event queue plus virtual clock.
#[derive(Debug)]
pub struct Scheduler<K> {
    now: SimTime,
    next_index: u64,
    queue: BinaryHeap<Event<K>>,
    cancelled: HashSet<u64>,
    processed: u64,
}

impl<K> Default for Scheduler<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Scheduler<K> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_index: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, fire_time: SimTime, kind: K) -> Result<EventHandle, SimError> {
        if fire_time < self.now {
            return Err(SimError::ScheduledInPast {
                fire: fire_time,
                now: self.now,
            });
        }
        let insertion_index = self.next_index;
        self.next_index += 1;
        self.queue.push(Event {
            fire_time,
            insertion_index,
            kind,
        });
        Ok(EventHandle(insertion_index))
    }

    /// Schedules `delay` after the current clock.
    pub fn schedule_in(&mut self, delay: SimTime, kind: K) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, kind).expect("relative schedule is never in the past")
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_index {
            return false;
        }
        let pending = self.queue.iter().any(|e| e.insertion_index == handle.0);
        pending && self.cancelled.insert(handle.0)
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.skip_cancelled();
        self.queue.peek().map(|e| e.fire_time)
    }

    /// Pops the next event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<Event<K>> {
        self.skip_cancelled();
        let ev = self.queue.pop()?;
        debug_assert!(ev.fire_time >= self.now);
        self.now = ev.fire_time;
        self.processed += 1;
        Some(ev)
    }

    /// Pops the next event only if it fires at or before `end`.
    pub fn pop_until(&mut self, end: SimTime) -> Option<Event<K>> {
        match self.peek_time() {
            Some(t) if t <= end => self.pop(),
            _ => None,
        }
    }

    /// Moves the clock forward without processing anything.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Iterates over pending (non-cancelled) events in no particular order.
    pub fn iter_pending(&self) -> impl Iterator<Item = &Event<K>> {
        self.queue
            .iter()
            .filter(move |e| !self.cancelled.contains(&e.insertion_index))
    }

    fn skip_cancelled(&mut self) {
        while let Some(top) = self.queue.peek() {
            if self.cancelled.remove(&top.insertion_index) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub events_processed: u64,
    pub clock: SimTime,
}

/// Something that consumes events from a [`Scheduler`].
pub trait World {
    type Kind: fmt::Debug;

    fn handle(
        &mut self,
        sched: &mut Scheduler<Self::Kind>,
        now: SimTime,
        kind: Self::Kind,
    ) -> Result<(), String>;
}

/// Processes every event with `fire_time <= end`, then sets the clock to `end`.
pub fn run_until<W: World>(
    world: &mut W,
    sched: &mut Scheduler<W::Kind>,
    end: SimTime,
) -> Result<RunSummary, SimError> {
    let start = sched.processed();
    while let Some(ev) = sched.pop_until(end) {
        let kind_name = format!("{:?}", ev.kind);
        world
            .handle(sched, ev.fire_time, ev.kind)
            .map_err(|reason| SimError::Handler {
                kind: kind_name,
                time: ev.fire_time,
                reason,
            })?;
    }
    sched.advance_to(end);
    Ok(RunSummary {
        events_processed: sched.processed() - start,
        clock: sched.now(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    Uniform(f64, f64),
    IntUniform(i64, i64),
    Exponential(f64),
    Bernoulli(f64),
}

impl Distribution {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidDistribution(msg));
        match *self {
            Distribution::Uniform(a, b) if !(a.is_finite() && b.is_finite()) || a > b => {
                bad(format!("uniform({a}, {b}) needs finite a <= b"))
            }
            Distribution::IntUniform(a, b) if a > b => {
                bad(format!("integer-uniform({a}, {b}) needs a <= b"))
            }
            Distribution::Exponential(mean) if !(mean > 0.0) || !mean.is_finite() => {
                bad(format!("exponential mean {mean} must be positive"))
            }
            Distribution::Bernoulli(p) if !(0.0..=1.0).contains(&p) => {
                bad(format!("bernoulli p {p} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// FNV-1a; stable across platforms and compiler versions, unlike std's hasher.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One independent random stream per stochastic process.
///
/// Sequential draws come from ChaCha8 seeded with `splitmix64(seed ^ fnv1a(stream_id))`.
/// [`RngStream::keyed_unit`] is a counter-based draw: the same key always
/// yields the same value, independent of how many draws happened before.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: String,
    derived: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        let stream_id = stream_id.into();
        let derived = splitmix64(seed ^ label_hash(&stream_id));
        Self {
            seed,
            stream_id,
            derived,
            rng: ChaCha8Rng::seed_from_u64(derived),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        unit_from_bits(self.rng.next_u64())
    }

    pub fn next_random(&mut self, dist: Distribution) -> Result<f64, SimError> {
        dist.validate()?;
        Ok(match dist {
            Distribution::Uniform(a, b) => a + (b - a) * self.next_unit(),
            Distribution::IntUniform(a, b) => {
                let span = (b - a) as u64 + 1;
                a as f64 + self.bounded(span) as f64
            }
            Distribution::Exponential(mean) => -mean * (1.0 - self.next_unit()).ln(),
            Distribution::Bernoulli(p) => {
                if self.next_unit() < p {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool, SimError> {
        Ok(self.next_random(Distribution::Bernoulli(p))? > 0.5)
    }

    pub fn int_uniform(&mut self, a: i64, b: i64) -> Result<i64, SimError> {
        Ok(self.next_random(Distribution::IntUniform(a, b))? as i64)
    }

    pub fn uniform(&mut self, a: f64, b: f64) -> Result<f64, SimError> {
        self.next_random(Distribution::Uniform(a, b))
    }

    /// Uniform in [0, 1) as a pure function of `(seed, stream_id, key)`.
    pub fn keyed_unit(&self, key: u64) -> f64 {
        unit_from_bits(splitmix64(self.derived ^ splitmix64(key)))
    }

    // Unbiased integer in [0, span) by rejection; span == 0 means the full u64 range.
    fn bounded(&mut self, span: u64) -> u64 {
        if span == 0 {
            return self.rng.next_u64();
        }
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return v % span;
            }
        }
    }
}

/// Mixes several integers into one key for [`RngStream::keyed_unit`].
pub fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |acc, &p| splitmix64(acc ^ p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Recorder {
        seen: Vec<(SimTime, u32)>,
    }

    impl World for Recorder {
        type Kind = u32;
        fn handle(&mut self, _s: &mut Scheduler<u32>, now: SimTime, k: u32) -> Result<(), String> {
            if k == 999 {
                return Err("boom".into());
            }
            self.seen.push((now, k));
            Ok(())
        }
    }

    #[test]
    fn zero_time_event_runs_first() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(10), 2).unwrap();
        s.schedule(SimTime(0), 1).unwrap();
        let mut w = Recorder { seen: vec![] };
        run_until(&mut w, &mut s, SimTime(100)).unwrap();
        assert_eq!(w.seen, vec![(SimTime(0), 1), (SimTime(10), 2)]);
    }

    #[test]
    fn equal_times_keep_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(5000), 1).unwrap();
        s.schedule(SimTime(5000), 2).unwrap();
        assert_eq!(s.pop().unwrap().kind, 1);
        assert_eq!(s.pop().unwrap().kind, 2);
    }

    #[test]
    fn scheduling_in_past_is_an_error() {
        let mut s: Scheduler<u32> = Scheduler::new();
        s.advance_to(SimTime(50));
        assert!(matches!(
            s.schedule(SimTime(49), 0),
            Err(SimError::ScheduledInPast { .. })
        ));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut s = Scheduler::new();
        let mut w = Recorder { seen: vec![] };
        let summary = run_until(&mut w, &mut s, SimTime(1_000_000)).unwrap();
        assert_eq!(summary.clock, SimTime(1_000_000));
        assert_eq!(summary.events_processed, 0);
    }

    #[test]
    fn end_boundary_is_inclusive() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(100), 7).unwrap();
        s.schedule(SimTime(101), 8).unwrap();
        let mut w = Recorder { seen: vec![] };
        run_until(&mut w, &mut s, SimTime(100)).unwrap();
        assert_eq!(w.seen, vec![(SimTime(100), 7)]);
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn handler_error_names_kind_and_time() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(42), 999).unwrap();
        let mut w = Recorder { seen: vec![] };
        let err = run_until(&mut w, &mut s, SimTime(100)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("999") && msg.contains("0.000042s"), "{msg}");
    }

    #[test]
    fn cancelled_events_are_skipped() {
        let mut s = Scheduler::new();
        let h = s.schedule(SimTime(1), 1).unwrap();
        s.schedule(SimTime(2), 2).unwrap();
        assert!(s.cancel(h));
        assert!(!s.cancel(h));
        assert_eq!(s.pending(), 1);
        assert_eq!(s.pop().unwrap().kind, 2);
        assert!(s.pop().is_none());
    }

    #[test]
    fn million_random_events_pop_sorted() {
        let mut rng = RngStream::new(7, "sched-test");
        let mut s = Scheduler::new();
        let mut input = Vec::with_capacity(1_000_000);
        for i in 0..1_000_000u32 {
            let t = SimTime(rng.next_u64() % 10_000);
            s.schedule(t, i).unwrap();
            input.push((t, i));
        }
        // insertion index equals i, so a stable sort by time is the oracle
        input.sort_by_key(|&(t, _)| t);
        let mut popped = Vec::with_capacity(input.len());
        while let Some(ev) = s.pop() {
            popped.push((ev.fire_time, ev.kind));
        }
        assert_eq!(popped, input);
    }

    #[test]
    fn int_uniform_stays_in_range() {
        let mut r = RngStream::new(1, "background");
        for _ in 0..10_000 {
            let v = r.int_uniform(10, 20).unwrap();
            assert!((10..=20).contains(&v));
        }
    }

    #[test]
    fn bernoulli_zero_is_always_false() {
        let mut r = RngStream::new(3, "loss");
        assert!((0..10_000).all(|_| !r.bernoulli(0.0).unwrap()));
    }

    #[test]
    fn uniform_mean_converges() {
        let mut r = RngStream::new(11, "lln");
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| r.uniform(0.0, 1.0).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut r = RngStream::new(0, "x");
        assert!(r.next_random(Distribution::Uniform(2.0, 1.0)).is_err());
        assert!(r.next_random(Distribution::IntUniform(5, 4)).is_err());
        assert!(r.next_random(Distribution::Exponential(0.0)).is_err());
        assert!(r.next_random(Distribution::Bernoulli(1.5)).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let mut a = RngStream::new(5, "loss");
        let mut b = RngStream::new(5, "loss");
        let mut c = RngStream::new(5, "episodes");
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let vc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
        assert_eq!(a.keyed_unit(99), RngStream::new(5, "loss").keyed_unit(99));
    }

    #[test]
    fn pinned_first_draw() {
        // Guards the documented generator: changing derivation or algorithm breaks replay.
        let mut r = RngStream::new(1, "loss");
        let first = r.next_u64();
        let again = RngStream::new(1, "loss").next_u64();
        assert_eq!(first, again);
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
