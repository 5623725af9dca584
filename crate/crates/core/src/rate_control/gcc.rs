//! Google congestion control: delay-gradient Kalman filter, adaptive-threshold
//! overuse detector, AIMD rate region and a loss-based final adjustment.
//!
//! Delays inside the filter are in milliseconds. Packets are grouped into
//! 5 ms send bursts; for consecutive groups the filter sees
//! `d = (arrival_j - arrival_i) - (departure_j - departure_i)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{clamp_rate, RateController, RateDecision, Region};
use crate::feedback::{PacketResult, ReceiverReport};
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GccConfig {
    pub start_rate_bps: f64,
    pub min_rate_bps: f64,
    pub max_rate_bps: f64,
    pub group_window_us: u64,
    pub kalman_process_noise: f64,
    pub kalman_initial_error: f64,
    pub noise_alpha: f64,
    pub noise_initial_var: f64,
    pub gamma_initial: f64,
    pub k_up: f64,
    pub k_down: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub overuse_time_ms: f64,
    pub beta: f64,
    pub multiplicative_increase: f64,
    pub loss_high: f64,
    pub loss_low: f64,
    pub loss_increase: f64,
    pub loss_decrease_gain: f64,
    pub rate_window_us: u64,
    pub loss_window_us: u64,
}

impl Default for GccConfig {
    fn default() -> Self {
        Self {
            start_rate_bps: 1_000_000.0,
            min_rate_bps: 400_000.0,
            max_rate_bps: 10_000_000.0,
            group_window_us: 5_000,
            kalman_process_noise: 1e-3,
            kalman_initial_error: 0.1,
            noise_alpha: 0.01,
            noise_initial_var: 50.0,
            gamma_initial: 12.5,
            k_up: 0.0087,
            k_down: 0.039,
            gamma_min: 6.0,
            gamma_max: 600.0,
            overuse_time_ms: 10.0,
            beta: 0.85,
            multiplicative_increase: 1.08,
            loss_high: 0.10,
            loss_low: 0.02,
            loss_increase: 1.05,
            loss_decrease_gain: 0.5,
            rate_window_us: 500_000,
            loss_window_us: 1_000_000,
        }
    }
}

/// Three-branch loss adjustment.
pub fn loss_update(a_delay: f64, p: f64, cfg: &GccConfig) -> f64 {
    if p > cfg.loss_high {
        a_delay * (1.0 - cfg.loss_decrease_gain * p)
    } else if p < cfg.loss_low {
        (cfg.loss_increase * a_delay).min(cfg.max_rate_bps)
    } else {
        a_delay
    }
}

/// Scalar Kalman filter over the per-group delay variation.
#[derive(Debug, Clone)]
pub struct DelayKalman {
    m: f64,
    e: f64,
    var_v: f64,
    q: f64,
    alpha: f64,
    updates: u64,
}

impl DelayKalman {
    pub fn new(cfg: &GccConfig) -> Self {
        Self {
            m: 0.0,
            e: cfg.kalman_initial_error,
            var_v: cfg.noise_initial_var,
            q: cfg.kalman_process_noise,
            alpha: cfg.noise_alpha,
            updates: 0,
        }
    }

    pub fn offset(&self) -> f64 {
        self.m
    }

    pub fn variance(&self) -> f64 {
        self.e
    }

    pub fn noise_var(&self) -> f64 {
        self.var_v
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// `d_ms`: delay variation of the group pair; `ts_delta_ms`: their send spacing.
    pub fn update(&mut self, d_ms: f64, ts_delta_ms: f64) -> f64 {
        self.updates += 1;
        self.e += self.q;
        let z = d_ms - self.m;
        let beta = (1.0 - self.alpha).powf(30.0 * ts_delta_ms / 1000.0);
        let max_res = 3.0 * self.var_v.sqrt();
        let r = z.clamp(-max_res, max_res);
        self.var_v = (beta * self.var_v + (1.0 - beta) * r * r).max(1.0);
        let k = self.e / (self.var_v + self.e);
        self.m += k * z;
        self.e = ((1.0 - k) * self.e).max(1e-9);
        self.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Normal,
    Overuse,
    Underuse,
}

#[derive(Debug, Clone)]
pub struct OveruseDetector {
    gamma: f64,
    k_up: f64,
    k_down: f64,
    gamma_min: f64,
    gamma_max: f64,
    overuse_time_ms: f64,
    time_over: Option<f64>,
    over_count: u32,
    prev_t: f64,
    last_update_ms: Option<f64>,
    hypothesis: Signal,
}

impl OveruseDetector {
    pub fn new(cfg: &GccConfig) -> Self {
        Self {
            gamma: cfg.gamma_initial,
            k_up: cfg.k_up,
            k_down: cfg.k_down,
            gamma_min: cfg.gamma_min,
            gamma_max: cfg.gamma_max,
            overuse_time_ms: cfg.overuse_time_ms,
            time_over: None,
            over_count: 0,
            prev_t: 0.0,
            last_update_ms: None,
            hypothesis: Signal::Normal,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn hypothesis(&self) -> Signal {
        self.hypothesis
    }

    /// `t`: scaled delay trend, `ts_delta_ms`: group send spacing, `now_ms`: group arrival.
    pub fn detect(&mut self, t: f64, ts_delta_ms: f64, now_ms: f64) -> Signal {
        if t > self.gamma {
            let over = match self.time_over {
                None => ts_delta_ms / 2.0,
                Some(x) => x + ts_delta_ms,
            };
            self.time_over = Some(over);
            self.over_count += 1;
            if over > self.overuse_time_ms && self.over_count > 1 && t >= self.prev_t {
                self.time_over = Some(0.0);
                self.over_count = 0;
                self.hypothesis = Signal::Overuse;
            }
        } else if t < -self.gamma {
            self.time_over = None;
            self.over_count = 0;
            self.hypothesis = Signal::Underuse;
        } else {
            self.time_over = None;
            self.over_count = 0;
            self.hypothesis = Signal::Normal;
        }
        self.prev_t = t;
        self.adapt(t, now_ms);
        self.hypothesis
    }

    fn adapt(&mut self, t: f64, now_ms: f64) {
        let last = *self.last_update_ms.get_or_insert(now_ms);
        let abs = t.abs();
        // spikes far above the threshold (e.g. a handover burst) are not learned
        if abs > self.gamma + 15.0 {
            self.last_update_ms = Some(now_ms);
            return;
        }
        let k = if abs < self.gamma { self.k_down } else { self.k_up };
        let dt = (now_ms - last).clamp(0.0, 100.0);
        self.gamma = (self.gamma + k * (abs - self.gamma) * dt).clamp(self.gamma_min, self.gamma_max);
        self.last_update_ms = Some(now_ms);
    }
}

/// Running estimate of the rate at which overuse happens (kbps).
#[derive(Debug, Clone)]
pub struct LinkCapacityEstimator {
    estimate: Option<f64>,
    deviation: f64,
}

impl Default for LinkCapacityEstimator {
    fn default() -> Self {
        Self {
            estimate: None,
            deviation: 0.4,
        }
    }
}

impl LinkCapacityEstimator {
    pub fn has_estimate(&self) -> bool {
        self.estimate.is_some()
    }

    pub fn estimate_bps(&self) -> Option<f64> {
        self.estimate.map(|e| e * 1000.0)
    }

    fn spread(&self, est: f64) -> f64 {
        3.0 * (self.deviation * est).sqrt()
    }

    pub fn upper_bound_bps(&self) -> f64 {
        match self.estimate {
            Some(e) => (e + self.spread(e)) * 1000.0,
            None => f64::INFINITY,
        }
    }

    pub fn on_overuse(&mut self, rate_bps: f64) {
        let sample = rate_bps / 1000.0;
        let alpha = 0.05;
        let est = match self.estimate {
            None => sample,
            Some(e) => (1.0 - alpha) * e + alpha * sample,
        };
        let norm = est.max(1.0);
        let err = est - sample;
        self.deviation = ((1.0 - alpha) * self.deviation + alpha * err * err / norm).clamp(0.4, 2.5);
        self.estimate = Some(est);
    }

    pub fn reset(&mut self) {
        self.estimate = None;
    }
}

#[derive(Debug, Clone)]
pub struct Aimd {
    rate: f64,
    region: Region,
    beta: f64,
    mult: f64,
    min_rate: f64,
    max_rate: f64,
    last_update: Option<SimTime>,
    capacity: LinkCapacityEstimator,
}

impl Aimd {
    pub fn new(cfg: &GccConfig) -> Self {
        Self {
            rate: cfg.start_rate_bps,
            region: Region::Hold,
            beta: cfg.beta,
            mult: cfg.multiplicative_increase,
            min_rate: cfg.min_rate_bps,
            max_rate: cfg.max_rate_bps,
            last_update: None,
            capacity: LinkCapacityEstimator::default(),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn capacity(&self) -> &LinkCapacityEstimator {
        &self.capacity
    }

    /// Forces the estimate (loss-based decreases persist through here).
    pub fn set_rate(&mut self, bps: f64) {
        self.rate = bps.clamp(self.min_rate, self.max_rate);
    }

    fn near_max_increase_per_s(&self, rtt: SimTime) -> f64 {
        let bits_per_frame = self.rate / 30.0;
        let packets = (bits_per_frame / (1200.0 * 8.0)).ceil().max(1.0);
        let packet_bits = bits_per_frame / packets;
        let response_s = (rtt + SimTime::from_millis(100)).as_secs_f64();
        (0.5 * packet_bits / response_s).max(4_000.0)
    }

    /// One AIMD step. Returns the region this step acted in.
    pub fn update(&mut self, signal: Signal, measured: Option<f64>, rtt: SimTime, now: SimTime) -> Region {
        self.region = match (signal, self.region) {
            (Signal::Overuse, _) => Region::Decrease,
            (Signal::Underuse, _) => Region::Hold,
            (Signal::Normal, Region::Hold) => Region::Increase,
            (Signal::Normal, r) => r,
        };
        let dt = match self.last_update {
            Some(t) => (now.saturating_sub(t)).as_secs_f64().min(1.0),
            None => 0.0,
        };
        self.last_update = Some(now);
        let acted = self.region;
        match self.region {
            Region::Hold => {}
            Region::Increase => {
                if let Some(r) = measured {
                    if self.capacity.has_estimate() && r > self.capacity.upper_bound_bps() {
                        self.capacity.reset();
                    }
                }
                if self.capacity.has_estimate() {
                    self.rate += self.near_max_increase_per_s(rtt) * dt;
                } else {
                    let inc = self.rate * (self.mult.powf(dt) - 1.0);
                    self.rate += if dt > 0.0 { inc.max(1000.0 * dt) } else { 0.0 };
                }
                if let Some(r) = measured {
                    self.rate = self.rate.min(1.5 * r + 10_000.0);
                }
            }
            Region::Decrease => {
                if let Some(r) = measured {
                    self.rate = self.rate.min(self.beta * r);
                    self.capacity.on_overuse(r);
                }
                self.region = Region::Hold;
            }
        }
        self.rate = self.rate.clamp(self.min_rate, self.max_rate);
        acted
    }
}

#[derive(Debug, Clone, Copy)]
struct Group {
    first_send: SimTime,
    last_send: SimTime,
    last_arrival: SimTime,
}

/// Delay- and loss-based controller.
#[derive(Debug, Clone)]
pub struct Gcc {
    cfg: GccConfig,
    kalman: DelayKalman,
    detector: OveruseDetector,
    aimd: Aimd,
    current: Option<Group>,
    previous: Option<Group>,
    latched_overuse: bool,
    have_feedback: bool,
    rate_window: VecDeque<(SimTime, usize)>,
    rate_bytes: usize,
    first_arrival: Option<SimTime>,
    latest_arrival: SimTime,
    loss_window: VecDeque<(SimTime, bool)>,
    loss_count: usize,
    rtt: SimTime,
    last_loss_cut: Option<SimTime>,
    trace: Vec<(f64, f64)>,
    record_trace: bool,
}

impl Gcc {
    pub fn new(cfg: GccConfig) -> Self {
        Self {
            kalman: DelayKalman::new(&cfg),
            detector: OveruseDetector::new(&cfg),
            aimd: Aimd::new(&cfg),
            cfg,
            current: None,
            previous: None,
            latched_overuse: false,
            have_feedback: false,
            rate_window: VecDeque::new(),
            rate_bytes: 0,
            first_arrival: None,
            latest_arrival: SimTime::ZERO,
            loss_window: VecDeque::new(),
            loss_count: 0,
            rtt: SimTime::from_millis(100),
            last_loss_cut: None,
            trace: Vec::new(),
            record_trace: false,
        }
    }

    pub fn config(&self) -> &GccConfig {
        &self.cfg
    }

    pub fn kalman(&self) -> &DelayKalman {
        &self.kalman
    }

    pub fn detector(&self) -> &OveruseDetector {
        &self.detector
    }

    pub fn aimd(&self) -> &Aimd {
        &self.aimd
    }

    /// Keeps `(m, gamma)` per filter update for inspection.
    pub fn record_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn trace(&self) -> &[(f64, f64)] {
        &self.trace
    }

    /// Acknowledged receive rate over the trailing window, bits/s.
    pub fn measured_rate(&self) -> Option<f64> {
        let first = self.first_arrival?;
        let window = SimTime(self.cfg.rate_window_us);
        let span = (self.latest_arrival - first).min(window);
        if span < SimTime::from_millis(100) {
            return None;
        }
        Some(self.rate_bytes as f64 * 8.0 / span.as_secs_f64())
    }

    pub fn loss_fraction(&self) -> f64 {
        if self.loss_window.is_empty() {
            0.0
        } else {
            self.loss_count as f64 / self.loss_window.len() as f64
        }
    }

    fn on_group_pair(&mut self, prev: Group, cur: Group) {
        let send_delta = (cur.last_send.0 as f64 - prev.last_send.0 as f64) / 1000.0;
        let arrival_delta = (cur.last_arrival.0 as f64 - prev.last_arrival.0 as f64) / 1000.0;
        let d = arrival_delta - send_delta;
        let m = self.kalman.update(d, send_delta);
        let n = self.kalman.updates().min(60) as f64;
        let sig = self
            .detector
            .detect(n * m, send_delta, cur.last_arrival.0 as f64 / 1000.0);
        if sig == Signal::Overuse {
            self.latched_overuse = true;
        }
        if self.record_trace {
            self.trace.push((m, self.detector.gamma()));
        }
    }

    fn on_received(&mut self, send: SimTime, arrival: SimTime) {
        let window = SimTime(self.cfg.group_window_us);
        match self.current.as_mut() {
            None => {
                self.current = Some(Group {
                    first_send: send,
                    last_send: send,
                    last_arrival: arrival,
                })
            }
            Some(g) if send >= g.first_send && send - g.first_send <= window => {
                g.last_send = g.last_send.max(send);
                g.last_arrival = g.last_arrival.max(arrival);
            }
            Some(g) if send < g.first_send => {
                // reordered from an older group; ignored
            }
            Some(g) => {
                let done = *g;
                if let Some(prev) = self.previous {
                    if done.last_arrival >= prev.last_arrival {
                        self.on_group_pair(prev, done);
                    }
                }
                self.previous = Some(done);
                self.current = Some(Group {
                    first_send: send,
                    last_send: send,
                    last_arrival: arrival,
                });
            }
        }
    }
}

impl RateController for Gcc {
    fn name(&self) -> &'static str {
        "gcc"
    }

    fn on_twcc(&mut self, results: &[PacketResult], now: SimTime) {
        if results.is_empty() {
            return;
        }
        self.have_feedback = true;
        for r in results {
            self.loss_window.push_back((now, r.arrival.is_none()));
            if r.arrival.is_none() {
                self.loss_count += 1;
            }
            if let Some(a) = r.arrival {
                self.first_arrival.get_or_insert(a);
                self.latest_arrival = self.latest_arrival.max(a);
                self.rate_window.push_back((a, r.size));
                self.rate_bytes += r.size;
                self.on_received(r.send_time, a);
            }
        }
        let horizon = self.latest_arrival.saturating_sub(SimTime(self.cfg.rate_window_us));
        while let Some(&(t, b)) = self.rate_window.front() {
            if t < horizon {
                self.rate_window.pop_front();
                self.rate_bytes -= b;
            } else {
                break;
            }
        }
        let loss_horizon = now.saturating_sub(SimTime(self.cfg.loss_window_us));
        while let Some(&(t, lost)) = self.loss_window.front() {
            if t < loss_horizon {
                self.loss_window.pop_front();
                if lost {
                    self.loss_count -= 1;
                }
            } else {
                break;
            }
        }
    }

    fn on_rr(&mut self, _rr: &ReceiverReport, rtt: Option<SimTime>, _now: SimTime) {
        if let Some(r) = rtt {
            self.rtt = r;
        }
    }

    fn decide(&mut self, now: SimTime) -> RateDecision {
        if !self.have_feedback {
            return RateDecision {
                target_bps: clamp_rate(self.cfg.start_rate_bps),
                region: None,
            };
        }
        let signal = if std::mem::take(&mut self.latched_overuse) {
            Signal::Overuse
        } else {
            self.detector.hypothesis()
        };
        let region = self.aimd.update(signal, self.measured_rate(), self.rtt, now);
        let p = self.loss_fraction();
        let target = loss_update(self.aimd.rate(), p, &self.cfg);
        // a loss cut persists at most once per loss window
        if p > self.cfg.loss_high
            && self
                .last_loss_cut
                .is_none_or(|t| now - t >= SimTime(self.cfg.loss_window_us))
        {
            self.aimd.set_rate(target);
            self.last_loss_cut = Some(now);
        }
        RateDecision {
            target_bps: clamp_rate(target.clamp(self.cfg.min_rate_bps, self.cfg.max_rate_bps)),
            region: Some(region),
        }
    }
}
