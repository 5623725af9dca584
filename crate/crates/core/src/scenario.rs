//! Scenario files and compiled-in presets.
//!
//! A scenario is a JSON document. Durations are milliseconds (`*_ms`,
//! `*_us` where noted), rates are bits per second, and unknown keys are
//! rejected.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, Result};
use crate::feedback::FeedbackConfig;
use crate::media::EncoderConfig;
use crate::network::{
    BackgroundLoad, EventProcess, LinkEvent, LinkEventKind, LinkProfile, ProcessKind, TransportMode,
    DEFAULT_HANDOVER_PAUSE, DEFAULT_QUEUE_LIMIT,
};
use crate::packetizer::RtpConfig;
use crate::rate_control::{aggressive_script, ControllerKind, GccConfig};
use crate::receiver::ReceiverConfig;
use crate::reliability::ReliabilityConfig;
use crate::sim::SimTime;

fn ms(key: &str, v: f64) -> Result<SimTime, ConfigError> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(ConfigError::new(key, format!("duration {v} ms must be finite and >= 0")));
    }
    Ok(SimTime((v * 1000.0).round() as u64))
}

fn ms_range(key: &str, r: [f64; 2]) -> Result<(SimTime, SimTime), ConfigError> {
    Ok((ms(key, r[0])?, ms(key, r[1])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventSpec {
    Handover {
        start_ms: f64,
        #[serde(default = "default_pause")]
        pause_ms: f64,
    },
    Congestion {
        start_ms: f64,
        duration_ms: f64,
        capacity_factor: f64,
        #[serde(default)]
        extra_delay_ms: f64,
    },
    OutOfRange {
        start_ms: f64,
        duration_ms: f64,
    },
}

fn default_pause() -> f64 {
    DEFAULT_HANDOVER_PAUSE.as_millis_f64()
}

impl EventSpec {
    fn resolve(&self) -> Result<LinkEvent, ConfigError> {
        let key = "links.events";
        Ok(match *self {
            EventSpec::Handover { start_ms, pause_ms } => LinkEvent {
                kind: LinkEventKind::Handover,
                start: ms(key, start_ms)?,
                duration: ms(key, pause_ms)?,
            },
            EventSpec::Congestion {
                start_ms,
                duration_ms,
                capacity_factor,
                extra_delay_ms,
            } => LinkEvent {
                kind: LinkEventKind::Congestion {
                    capacity_factor,
                    extra_delay: ms(key, extra_delay_ms)?,
                },
                start: ms(key, start_ms)?,
                duration: ms(key, duration_ms)?,
            },
            EventSpec::OutOfRange {
                start_ms,
                duration_ms,
            } => LinkEvent {
                kind: LinkEventKind::OutOfRange,
                start: ms(key, start_ms)?,
                duration: ms(key, duration_ms)?,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKindSpec {
    Handover,
    Congestion,
    OutOfRange,
}

/// Randomly placed events, drawn once per run from the link's event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub kind: ProcessKindSpec,
    pub count: u32,
    pub window_ms: [f64; 2],
    pub duration_ms: [f64; 2],
    #[serde(default = "unit_range")]
    pub capacity_factor: [f64; 2],
    #[serde(default)]
    pub extra_delay_ms: [f64; 2],
}

fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub units: [i64; 2],
    pub per_unit_bps: [f64; 2],
    #[serde(default = "one")]
    pub direction_share: f64,
    pub mean_on_ms: f64,
    pub mean_off_ms: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        let b = BackgroundLoad::default();
        Self {
            units: [b.unit_count.0, b.unit_count.1],
            per_unit_bps: [b.per_unit_rate.0, b.per_unit_rate.1],
            direction_share: b.direction_share,
            mean_on_ms: b.mean_on.as_millis_f64(),
            mean_off_ms: b.mean_off.as_millis_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    pub capacity_bps: f64,
    pub delay_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default = "default_queue")]
    pub queue_limit_bytes: usize,
    #[serde(default)]
    pub random_loss: f64,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub processes: Vec<ProcessSpec>,
    /// `[t_ms, multiplier]` points, linearly interpolated.
    #[serde(default)]
    pub capacity_trace: Vec<[f64; 2]>,
    #[serde(default)]
    pub background: Option<BackgroundSpec>,
    #[serde(default)]
    pub available_until_ms: Option<f64>,
}

fn default_queue() -> usize {
    DEFAULT_QUEUE_LIMIT
}

impl LinkSpec {
    pub fn new(name: &str, capacity_bps: f64, delay_ms: f64) -> Self {
        Self {
            name: name.into(),
            capacity_bps,
            delay_ms,
            jitter_ms: 0.0,
            queue_limit_bytes: DEFAULT_QUEUE_LIMIT,
            random_loss: 0.0,
            events: Vec::new(),
            processes: Vec::new(),
            capacity_trace: Vec::new(),
            background: None,
            available_until_ms: None,
        }
    }

    pub fn resolve(&self) -> Result<LinkProfile, ConfigError> {
        let mut p = LinkProfile::new(
            self.name.clone(),
            self.capacity_bps,
            ms("links.delay_ms", self.delay_ms)?,
        );
        p.delay_jitter = ms("links.jitter_ms", self.jitter_ms)?;
        p.queue_limit = self.queue_limit_bytes;
        p.random_loss = self.random_loss;
        p.events = self
            .events
            .iter()
            .map(EventSpec::resolve)
            .collect::<Result<_, _>>()?;
        for s in &self.processes {
            let key = "links.processes";
            p.processes.push(EventProcess {
                kind: match s.kind {
                    ProcessKindSpec::Handover => ProcessKind::Handover,
                    ProcessKindSpec::Congestion => ProcessKind::Congestion,
                    ProcessKindSpec::OutOfRange => ProcessKind::OutOfRange,
                },
                count: s.count,
                window: ms_range(key, s.window_ms)?,
                duration: ms_range(key, s.duration_ms)?,
                capacity_factor: (s.capacity_factor[0], s.capacity_factor[1]),
                extra_delay: ms_range(key, s.extra_delay_ms)?,
            });
        }
        p.capacity_trace = self
            .capacity_trace
            .iter()
            .map(|pt| Ok((ms("links.capacity_trace", pt[0])?, pt[1])))
            .collect::<Result<_, ConfigError>>()?;
        if let Some(b) = &self.background {
            p.background = Some(BackgroundLoad {
                unit_count: (b.units[0], b.units[1]),
                per_unit_rate: (b.per_unit_bps[0], b.per_unit_bps[1]),
                direction_share: b.direction_share,
                mean_on: ms("links.background.mean_on_ms", b.mean_on_ms)?,
                mean_off: ms("links.background.mean_off_ms", b.mean_off_ms)?,
            });
        }
        p.available_until = self
            .available_until_ms
            .map(|v| ms("links.available_until_ms", v))
            .transpose()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultihomeSpec {
    /// Share of packets sent on the first link.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub fps: u32,
    pub bitrate_bps: u64,
    /// `null` is an infinite GOP.
    pub keyframe_interval: Option<u32>,
    pub keyframe_ratio: f64,
    pub encode_latency_us: u64,
    pub jitter: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            fps: e.fps,
            bitrate_bps: e.target_bitrate,
            keyframe_interval: e.keyframe_interval,
            keyframe_ratio: e.keyframe_size_ratio,
            encode_latency_us: e.encode_latency.0,
            jitter: e.bitrate_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtpSpec {
    pub mtu: usize,
    pub pacing_multiplier: f64,
    pub timestamp_clock_hz: u32,
}

impl Default for RtpSpec {
    fn default() -> Self {
        let r = RtpConfig::default();
        Self {
            mtu: r.mtu,
            pacing_multiplier: r.pacing_multiplier,
            timestamp_clock_hz: r.timestamp_clock_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilitySpec {
    pub nack_enabled: bool,
    pub fec_enabled: bool,
    pub fec_group_delta: usize,
    pub fec_group_key: usize,
    pub rtx_age_ms: f64,
    pub rtx_bandwidth_fraction: f64,
    pub rtx_max_count: u32,
    pub rtx_rtt_gate: f64,
}

impl Default for ReliabilitySpec {
    fn default() -> Self {
        let r = ReliabilityConfig::default();
        Self {
            nack_enabled: r.nack_enabled,
            fec_enabled: r.fec_enabled,
            fec_group_delta: r.fec_group_delta,
            fec_group_key: r.fec_group_key,
            rtx_age_ms: r.rtx_age.as_millis_f64(),
            rtx_bandwidth_fraction: r.rtx_bandwidth_fraction,
            rtx_max_count: r.rtx_max_count,
            rtx_rtt_gate: r.rtx_rtt_gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSpec {
    pub playout_delay_ms: f64,
    pub stall_allowance_ms: f64,
    pub nack_interval_ms: f64,
    pub nack_max_count: u32,
    pub decode_latency_us: u64,
    pub keyframe_request_enabled: bool,
}

impl Default for ReceiverSpec {
    fn default() -> Self {
        let r = ReceiverConfig::default();
        Self {
            playout_delay_ms: r.playout_delay.as_millis_f64(),
            stall_allowance_ms: r.stall_allowance.as_millis_f64(),
            nack_interval_ms: r.nack_interval.as_millis_f64(),
            nack_max_count: r.nack_max_count,
            decode_latency_us: r.decode_latency.0,
            keyframe_request_enabled: r.keyframe_request_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSpec {
    pub rr_period_ms: f64,
    pub twcc_period_ms: f64,
    pub no_cost: bool,
}

impl Default for FeedbackSpec {
    fn default() -> Self {
        let f = FeedbackConfig::default();
        Self {
            rr_period_ms: f.rr_period.as_millis_f64(),
            twcc_period_ms: f.twcc_period.as_millis_f64(),
            no_cost: f.no_cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub start_rate_bps: f64,
    /// Rate held by the fixed controller.
    pub fixed_rate_bps: f64,
    /// `[t_s, bps]` steps for the scripted controller; empty means the aggressive ramp.
    pub script: Vec<[f64; 2]>,
    pub decision_interval_ms: f64,
    pub gcc: GccConfig,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Gcc,
            start_rate_bps: 1_000_000.0,
            fixed_rate_bps: 10_000_000.0,
            script: Vec::new(),
            decision_interval_ms: 100.0,
            gcc: GccConfig::default(),
        }
    }
}

impl ControllerSpec {
    pub fn script_table(&self) -> Vec<(SimTime, f64)> {
        if self.script.is_empty() {
            aggressive_script()
        } else {
            self.script
                .iter()
                .map(|p| (SimTime::from_secs_f64(p[0].max(0.0)), p[1]))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub links: Vec<LinkSpec>,
    /// Feedback path; derived from the first forward link when absent.
    #[serde(default)]
    pub reverse_link: Option<LinkSpec>,
    #[serde(default)]
    pub multihome: Option<MultihomeSpec>,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub rtp: RtpSpec,
    #[serde(default)]
    pub reliability: ReliabilitySpec,
    #[serde(default)]
    pub receiver: ReceiverSpec,
    #[serde(default)]
    pub feedback: FeedbackSpec,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub transport: TransportMode,
}

fn default_seed() -> u64 {
    1
}

/// Runtime configuration resolved from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub duration: SimTime,
    pub links: Vec<LinkProfile>,
    pub reverse: LinkProfile,
    pub multihome_ratio: Option<f64>,
    pub encoder: EncoderConfig,
    pub rtp: RtpConfig,
    pub reliability: ReliabilityConfig,
    pub receiver: ReceiverConfig,
    pub feedback: FeedbackConfig,
    pub decision_interval: SimTime,
}

/// Feedback direction: three times the forward capacity, same delay and loss, no events.
pub fn derived_reverse(forward: &LinkSpec) -> LinkSpec {
    let mut r = LinkSpec::new(&format!("{}.reverse", forward.name), forward.capacity_bps * 3.0, forward.delay_ms);
    r.random_loss = forward.random_loss;
    r.jitter_ms = forward.jitter_ms;
    r
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolve().map(|_| ())
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(ConfigError::new("duration_s", "must be > 0"));
        }
        match (self.links.len(), &self.multihome) {
            (0, _) => return Err(ConfigError::new("links", "at least one link is required")),
            (1, None) => {}
            (2, Some(_)) => {}
            (2, None) => {
                return Err(ConfigError::new("multihome", "two links require a multihome section"))
            }
            (1, Some(_)) => return Err(ConfigError::new("multihome", "requires exactly two links")),
            _ => return Err(ConfigError::new("links", "at most two links are supported")),
        }
        if self.multihome.is_some() && self.transport == TransportMode::Tcp {
            return Err(ConfigError::new("transport", "tcp mode supports a single link"));
        }
        let rtp = RtpConfig {
            mtu: self.rtp.mtu,
            pacing_multiplier: self.rtp.pacing_multiplier,
            timestamp_clock_hz: self.rtp.timestamp_clock_hz,
            ..RtpConfig::default()
        };
        rtp.validate()?;
        let links = self
            .links
            .iter()
            .map(LinkSpec::resolve)
            .collect::<Result<Vec<_>, _>>()?;
        for l in &links {
            l.validate(rtp.mtu)?;
        }
        let reverse = match &self.reverse_link {
            Some(r) => r.resolve()?,
            None => derived_reverse(&self.links[0]).resolve()?,
        };
        reverse.validate(rtp.mtu)?;
        let encoder = EncoderConfig {
            fps: self.encoder.fps,
            target_bitrate: self.encoder.bitrate_bps,
            keyframe_interval: self.encoder.keyframe_interval,
            keyframe_size_ratio: self.encoder.keyframe_ratio,
            encode_latency: SimTime(self.encoder.encode_latency_us),
            bitrate_jitter: self.encoder.jitter,
            ..EncoderConfig::default()
        };
        encoder.validate()?;
        let reliability = ReliabilityConfig {
            nack_enabled: self.reliability.nack_enabled,
            fec_enabled: self.reliability.fec_enabled,
            fec_group_delta: self.reliability.fec_group_delta,
            fec_group_key: self.reliability.fec_group_key,
            rtx_age: ms("reliability.rtx_age_ms", self.reliability.rtx_age_ms)?,
            rtx_bandwidth_fraction: self.reliability.rtx_bandwidth_fraction,
            rtx_max_count: self.reliability.rtx_max_count,
            rtx_rtt_gate: self.reliability.rtx_rtt_gate,
        };
        reliability.validate()?;
        let receiver = ReceiverConfig {
            fps: self.encoder.fps,
            playout_delay: ms("receiver.playout_delay_ms", self.receiver.playout_delay_ms)?,
            stall_allowance: ms("receiver.stall_allowance_ms", self.receiver.stall_allowance_ms)?,
            nack_enabled: self.reliability.nack_enabled && self.transport == TransportMode::Udp,
            nack_interval: ms("receiver.nack_interval_ms", self.receiver.nack_interval_ms)?,
            nack_max_count: self.receiver.nack_max_count,
            decode_latency: SimTime(self.receiver.decode_latency_us),
            keyframe_request_enabled: self.receiver.keyframe_request_enabled,
        };
        receiver.validate()?;
        let feedback = FeedbackConfig {
            rr_period: ms("feedback.rr_period_ms", self.feedback.rr_period_ms)?,
            twcc_period: ms("feedback.twcc_period_ms", self.feedback.twcc_period_ms)?,
            no_cost: self.feedback.no_cost,
        };
        feedback.validate()?;
        let decision_interval = ms("controller.decision_interval_ms", self.controller.decision_interval_ms)?;
        if decision_interval == SimTime::ZERO {
            return Err(ConfigError::new("controller.decision_interval_ms", "must be > 0"));
        }
        let c = &self.controller;
        for (k, v) in [("controller.start_rate_bps", c.start_rate_bps), ("controller.fixed_rate_bps", c.fixed_rate_bps)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::new(k, "must be > 0"));
            }
        }
        Ok(Resolved {
            duration: SimTime::from_secs_f64(self.duration_s),
            links,
            reverse,
            multihome_ratio: self.multihome.as_ref().map(|m| m.ratio),
            encoder,
            rtp,
            reliability,
            receiver,
            feedback,
            decision_interval,
        })
    }
}

/// Loads a preset by name or a scenario file by path.
pub fn load(name_or_path: &str) -> Result<Scenario> {
    if let Some(s) = preset(name_or_path) {
        return Ok(s);
    }
    let path = std::path::Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::Config(ConfigError::new(
            "scenario",
            format!(
                "`{name_or_path}` is neither a preset ({}) nor a file",
                PRESETS.join(", ")
            ),
        )));
    }
    let text = std::fs::read_to_string(path)?;
    Scenario::from_json(&text)
}

pub const PRESETS: &[&str] = &[
    "easy",
    "moderate",
    "hard",
    "congested_udp",
    "congested_tcp",
    "congested_nack",
    "congested_hnack",
    "congested_fec",
    "rev_like",
    "dit_like",
    "downlink_rev",
    "multihome_rev",
];

/// Named pairs run on the same seed for side-by-side comparison.
pub const PAIRS: &[(&str, &str, &str)] = &[
    ("udp_vs_tcp_congested", "congested_udp", "congested_tcp"),
    ("fec_on_off", "congested_fec", "congested_nack"),
    ("nack_vs_hnack", "congested_nack", "congested_hnack"),
    ("nack_on_off", "congested_nack", "congested_udp"),
];

fn base(name: &str, description: &str, duration_s: f64, link: LinkSpec) -> Scenario {
    Scenario {
        name: name.into(),
        description: description.into(),
        duration_s,
        seed: 1,
        links: vec![link],
        reverse_link: None,
        multihome: None,
        encoder: EncoderSpec::default(),
        rtp: RtpSpec::default(),
        reliability: ReliabilitySpec::default(),
        receiver: ReceiverSpec::default(),
        feedback: FeedbackSpec::default(),
        controller: ControllerSpec::default(),
        transport: TransportMode::Udp,
    }
}

fn congested(name: &str, description: &str) -> Scenario {
    let mut link = LinkSpec::new("5g-up", 6_000_000.0, 15.0);
    link.random_loss = 0.02;
    link.processes.push(ProcessSpec {
        kind: ProcessKindSpec::Congestion,
        count: 6,
        window_ms: [5_000.0, 110_000.0],
        duration_ms: [2_000.0, 10_000.0],
        capacity_factor: [0.6, 0.9],
        extra_delay_ms: [40.0, 110.0],
    });
    let mut s = base(name, description, 120.0, link);
    s.controller.kind = ControllerKind::Fixed;
    s.controller.fixed_rate_bps = 2_500_000.0;
    s.controller.start_rate_bps = 2_500_000.0;
    s.reliability.nack_enabled = false;
    s
}

pub fn preset(name: &str) -> Option<Scenario> {
    Some(match name {
        "easy" => {
            let mut link = LinkSpec::new("5g-up", 11_000_000.0, 15.0);
            link.random_loss = 0.0005;
            base(
                "easy",
                "Clean uplink slightly above the 10 Mbps ceiling with rare random loss.",
                300.0,
                link,
            )
        }
        "moderate" => {
            let mut link = LinkSpec::new("5g-up", 12_000_000.0, 15.0);
            link.random_loss = 0.01;
            link.processes.push(ProcessSpec {
                kind: ProcessKindSpec::Congestion,
                count: 6,
                window_ms: [10_000.0, 580_000.0],
                duration_ms: [2_000.0, 20_000.0],
                capacity_factor: [0.1, 0.5],
                extra_delay_ms: [20.0, 100.0],
            });
            // short dips between the big episodes
            link.processes.push(ProcessSpec {
                kind: ProcessKindSpec::Congestion,
                count: 60,
                window_ms: [5_000.0, 595_000.0],
                duration_ms: [1_000.0, 2_000.0],
                capacity_factor: [0.4, 0.8],
                extra_delay_ms: [20.0, 60.0],
            });
            base(
                "moderate",
                "Congested uplink: six episodes of 2-20 s cutting capacity to 10-50%, plus 60 short 1-2 s dips.",
                600.0,
                link,
            )
        }
        "hard" => {
            let mut link = LinkSpec::new("5g-up", 10_000_000.0, 20.0);
            link.random_loss = 0.03;
            link.processes.extend([
                ProcessSpec {
                    kind: ProcessKindSpec::Congestion,
                    count: 12,
                    window_ms: [5_000.0, 290_000.0],
                    duration_ms: [2_000.0, 20_000.0],
                    capacity_factor: [0.05, 0.3],
                    extra_delay_ms: [50.0, 300.0],
                },
                ProcessSpec {
                    kind: ProcessKindSpec::OutOfRange,
                    count: 4,
                    window_ms: [10_000.0, 290_000.0],
                    duration_ms: [2_000.0, 8_000.0],
                    capacity_factor: [1.0, 1.0],
                    extra_delay_ms: [0.0, 0.0],
                },
                ProcessSpec {
                    kind: ProcessKindSpec::Handover,
                    count: 20,
                    window_ms: [1_000.0, 299_000.0],
                    duration_ms: [200.0, 500.0],
                    capacity_factor: [1.0, 1.0],
                    extra_delay_ms: [0.0, 0.0],
                },
            ]);
            base(
                "hard",
                "Disrupted uplink: deep congestion, outages, frequent handovers, 3% loss.",
                300.0,
                link,
            )
        }
        "congested_udp" => congested("congested_udp", "Sandbox congestion, UDP, no NACK, no FEC, fixed 2.5 Mbps."),
        "congested_tcp" => {
            let mut s = congested("congested_tcp", "Same network as congested_udp over a reliable in-order pipe.");
            s.transport = TransportMode::Tcp;
            s
        }
        "congested_nack" => {
            let mut s = congested("congested_nack", "congested_udp with NACK retransmissions (default gates).");
            s.reliability.nack_enabled = true;
            s
        }
        "congested_hnack" => {
            let mut s = congested(
                "congested_hnack",
                "congested_nack with every NACK limit doubled: 20 requests and resends per packet, \
                 10 ms request interval, resend gate of half an RTT, twice the resend budget.",
            );
            s.reliability.nack_enabled = true;
            s.receiver.nack_max_count = 20;
            s.receiver.nack_interval_ms = 10.0;
            s.reliability.rtx_max_count = 20;
            s.reliability.rtx_rtt_gate = 0.5;
            s.reliability.rtx_bandwidth_fraction = 0.5;
            s
        }
        "congested_fec" => {
            let mut s = congested("congested_fec", "congested_nack plus XOR FEC (groups of 10, keyframes 4).");
            s.reliability.nack_enabled = true;
            s.reliability.fec_enabled = true;
            s
        }
        "rev_like" => {
            let mut link = LinkSpec::new("5g-up", 50_000_000.0, 15.0);
            link.capacity_trace = vec![[0.0, 1.0], [60_000.0, 0.8], [150_000.0, 0.5], [300_000.0, 0.45]];
            link.random_loss = 0.002;
            for i in 0..6 {
                link.events.push(EventSpec::Handover {
                    start_ms: 30_000.0 + 45_000.0 * i as f64,
                    pause_ms: 300.0,
                });
            }
            base(
                "rev_like",
                "Moving vessel leaving the harbour: capacity 50 Mbps falling to 20-30 Mbps, handovers every 45 s.",
                300.0,
                link,
            )
        }
        "dit_like" => {
            let mut link = LinkSpec::new("5g-up", 30_000_000.0, 15.0);
            link.capacity_trace = vec![
                [0.0, 1.0],
                [50_000.0, 0.5],
                [100_000.0, 0.33],
                [150_000.0, 0.7],
                [200_000.0, 0.4],
                [300_000.0, 0.9],
            ];
            link.random_loss = 0.002;
            link.background = Some(BackgroundSpec {
                direction_share: 0.5,
                ..BackgroundSpec::default()
            });
            base(
                "dit_like",
                "Dense urban cell with background users: capacity varying between 10 and 30 Mbps.",
                300.0,
                link,
            )
        }
        "downlink_rev" => {
            let mut link = LinkSpec::new("5g-down", 150_000_000.0, 15.0);
            link.capacity_trace = vec![[0.0, 1.0], [60_000.0, 0.8], [150_000.0, 0.5], [300_000.0, 0.45]];
            link.random_loss = 0.002;
            let mut reverse = LinkSpec::new("5g-up", 50_000_000.0, 15.0);
            reverse.random_loss = 0.002;
            let mut s = base(
                "downlink_rev",
                "rev_like in the downlink direction; feedback returns on the 3x slower uplink.",
                300.0,
                link,
            );
            s.reverse_link = Some(reverse);
            s
        }
        "multihome_rev" => {
            let mut cell = LinkSpec::new("5g-up", 20_000_000.0, 15.0);
            cell.random_loss = 0.002;
            let mut wifi = LinkSpec::new("wifi", 20_000_000.0, 5.0);
            wifi.random_loss = 0.002;
            wifi.available_until_ms = Some(210_000.0);
            let mut s = base(
                "multihome_rev",
                "Traffic split 50/50 over 5G and Wi-Fi; Wi-Fi is lost for good at 210 s.",
                300.0,
                cell,
            );
            s.links.push(wifi);
            s.multihome = Some(MultihomeSpec { ratio: 0.5 });
            s
        }
        _ => return None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetRow {
    pub name: String,
    pub description: String,
    pub duration_s: f64,
    pub controller: ControllerKind,
    pub transport: TransportMode,
    pub links: Vec<PresetLink>,
    pub nack: bool,
    pub fec: bool,
    pub nack_max_count: u32,
    pub nack_interval_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetLink {
    pub name: String,
    pub capacity_bps: f64,
    pub delay_ms: f64,
    pub random_loss: f64,
    pub events: usize,
    pub random_events: u32,
    pub available_until_ms: Option<f64>,
}

/// Machine-readable parameter table of every preset.
pub fn preset_table() -> Vec<PresetRow> {
    PRESETS
        .iter()
        .filter_map(|n| preset(n))
        .map(|s| PresetRow {
            links: s
                .links
                .iter()
                .map(|l| PresetLink {
                    name: l.name.clone(),
                    capacity_bps: l.capacity_bps,
                    delay_ms: l.delay_ms,
                    random_loss: l.random_loss,
                    events: l.events.len(),
                    random_events: l.processes.iter().map(|p| p.count).sum(),
                    available_until_ms: l.available_until_ms,
                })
                .collect(),
            name: s.name,
            description: s.description,
            duration_s: s.duration_s,
            controller: s.controller.kind,
            transport: s.transport,
            nack: s.reliability.nack_enabled,
            fec: s.reliability.fec_enabled,
            nack_max_count: s.receiver.nack_max_count,
            nack_interval_ms: s.receiver.nack_interval_ms,
        })
        .collect()
}
