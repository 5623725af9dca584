//! One media session: sender, impaired path, receiver and feedback loop,
//! driven by the event scheduler.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::feedback::{
    compute_rtt, deliver_feedback, PacketResult, ReceiverReport, SenderReport, TwccConsumer,
    TwccFeedback,
};
use crate::media::{capture_offset, Encoder, MediaFrame};
use crate::metrics::{
    plr_band, Conservation, DecisionRecord, MetricsRecorder, MetricsRow, RunSummary, Stat,
    CSV_SCHEMA_VERSION,
};
use crate::network::{DropReason, Link, MultiHome, Outcome, TcpAttempt, TcpPipe, TransportMode};
use crate::packetizer::{Pacer, Packetizer, RtpPacket};
use crate::rate_control::{
    ControllerKind, ExternalController, FixedController, Gcc, RateController, ScriptedController,
};
use crate::receiver::{Disposition, PlayoutOutcome, Receiver, SkipReason};
use crate::reliability::{FecEncoder, RetransmissionBuffer};
use crate::scenario::{Resolved, Scenario};
use crate::sim::{mix_key, run_until, RngStream, Scheduler, SimTime, World};

const SR_BYTES: usize = 52;
const RR_BYTES: usize = 32;
const PLI_BYTES: usize = 12;
const DEFAULT_RTT: SimTime = SimTime::from_millis(100);

// loss-key domains, so paired runs lose the same media packets
const KEY_MEDIA: u64 = 1;
const KEY_FEC: u64 = 2;
const KEY_SR: u64 = 3;
const KEY_FEEDBACK: u64 = 4;

/// Overrides applied on top of a scenario.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub controller: Option<ControllerKind>,
    pub transport: Option<TransportMode>,
}

impl RunOptions {
    /// The scenario with every override folded in.
    pub fn apply(&self, scenario: &Scenario) -> Scenario {
        let mut s = scenario.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(d) = self.duration_s {
            s.duration_s = d;
        }
        if let Some(c) = self.controller {
            s.controller.kind = c;
        }
        if let Some(t) = self.transport {
            s.transport = t;
            if t == TransportMode::Tcp {
                s.reliability.nack_enabled = false;
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
enum Payload {
    Rtp(Box<RtpPacket>),
    Sr(SenderReport),
}

#[derive(Debug, Clone)]
struct Forward {
    payload: Payload,
    bytes: usize,
    /// Highest TWCC feedback the sender had processed when this left.
    fb_ack: Option<u64>,
}

#[derive(Debug, Clone)]
enum FeedbackMsg {
    Nack(Vec<u16>),
    Pli,
    Twcc(Box<TwccFeedback>),
    Rr(ReceiverReport),
}

#[derive(Debug)]
enum Ev {
    Control,
    Capture(u64),
    Packetize(MediaFrame),
    PacerWake,
    Arrival(Box<Forward>),
    TcpRetry { seg: u64, attempt: u32 },
    TcpArrival(u64),
    NackTick,
    PlayoutWake(SimTime),
    TwccTick,
    RrTick,
    SrTick,
    Feedback(FeedbackMsg),
    Metrics,
}

/// Monotone counters, also used for bridge observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Counters {
    pub media_sent: u64,
    pub rtx_sent: u64,
    pub fec_sent: u64,
    pub sr_sent: u64,
    pub rx_bytes: u64,
    pub goodput_bytes: u64,
    pub playout_lost: u64,
    pub playout_expected: u64,
    pub frames_played: u64,
    pub frames_skipped: u64,
    pub feedback_sent: u64,
    pub feedback_lost: u64,
    pub fwd: Conservation,
}

struct State {
    scenario: Scenario,
    cfg: Resolved,
    encoder: Encoder,
    packetizer: Packetizer,
    pacer: Pacer,
    fec: FecEncoder,
    rtx: RetransmissionBuffer,
    links: Vec<Link>,
    reverse: Link,
    multihome: Option<MultiHome>,
    tcp: Option<TcpPipe>,
    segments: BTreeMap<u64, Forward>,
    next_seg: u64,
    receiver: Receiver,
    controller: Box<dyn RateController>,
    consumer: TwccConsumer,
    send_log: BTreeMap<u64, (SimTime, usize)>,
    next_transport_seq: u64,
    rtt: Option<SimTime>,
    target_bps: f64,
    pacer_wake: Option<SimTime>,
    playout_wake: Option<SimTime>,
    frame_packets: BTreeMap<u64, u64>,
    counters: Counters,
    octets_sent: u64,
    // per kind, so paired runs lose the same reports
    feedback_count: [u64; 4],
    metrics: MetricsRecorder,
    decisions: Vec<DecisionRecord>,
    // first-copy media payload arrived since the last bridge observation
    window_goodput: u64,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
    pub decisions: Vec<DecisionRecord>,
    /// The effective scenario, as JSON.
    pub config_echo: String,
}

impl RunReport {
    pub fn csv(&self) -> String {
        crate::metrics::to_csv(&self.rows)
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

pub struct Session {
    sched: Scheduler<Ev>,
    state: State,
}

pub fn build_controller(scenario: &Scenario) -> Box<dyn RateController> {
    let c = &scenario.controller;
    match c.kind {
        ControllerKind::Gcc => Box::new(Gcc::new(crate::rate_control::GccConfig {
            start_rate_bps: c.start_rate_bps,
            ..c.gcc.clone()
        })),
        ControllerKind::Fixed => Box::new(FixedController::new(c.fixed_rate_bps)),
        ControllerKind::Scripted => Box::new(ScriptedController::new(c.script_table())),
        ControllerKind::Bridge => Box::new(ExternalController::new(c.start_rate_bps)),
    }
}

pub fn config_digest(scenario: &Scenario) -> String {
    let json = serde_json::to_string(scenario).expect("scenario serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Session {
    pub fn new(scenario: &Scenario, opts: &RunOptions) -> Result<Self> {
        let scenario = opts.apply(scenario);
        let cfg = scenario.resolve()?;
        let seed = scenario.seed;
        let controller = build_controller(&scenario);

        let mut init = RngStream::new(seed, "session.init");
        let session_offset = init.next_u64() as u32;
        let initial_seq = init.next_u64() as u16;
        let fec_seq = init.next_u64() as u16;

        let encoder = Encoder::new(cfg.encoder.clone(), RngStream::new(seed, "encoder.jitter"))?;
        let packetizer = Packetizer::new(cfg.rtp.clone(), session_offset, initial_seq)?;
        let pacer = Pacer::new(cfg.encoder.target_bitrate, cfg.rtp.pacing_multiplier);
        let horizon = cfg.duration + SimTime::from_secs(1);
        let links = cfg
            .links
            .iter()
            .map(|p| Link::new(p.clone(), seed, horizon))
            .collect::<Result<Vec<_>, _>>()?;
        let reverse = Link::new(cfg.reverse.clone(), seed, horizon)?;
        let multihome = cfg.multihome_ratio.map(MultiHome::new).transpose()?;
        let tcp = (scenario.transport == TransportMode::Tcp)
            .then(|| TcpPipe::new(cfg.reverse.base_delay));

        let mut sched = Scheduler::new();
        let fb = cfg.feedback;
        sched.schedule_in(SimTime::ZERO, Ev::Control);
        sched.schedule_in(SimTime::ZERO, Ev::Capture(0));
        sched.schedule_in(fb.twcc_period, Ev::TwccTick);
        sched.schedule_in(fb.rr_period, Ev::SrTick);
        sched.schedule_in(fb.rr_period + SimTime(fb.rr_period.0 / 2), Ev::RrTick);
        if cfg.receiver.nack_enabled {
            sched.schedule_in(cfg.receiver.nack_tick(), Ev::NackTick);
        }
        let windows = cfg.duration.0.div_ceil(1_000_000);
        for k in 1..=windows {
            let t = SimTime((k * 1_000_000).min(cfg.duration.0));
            sched.schedule_in(t, Ev::Metrics);
        }

        let state = State {
            fec: FecEncoder::new(cfg.reliability.fec(), fec_seq),
            rtx: RetransmissionBuffer::from_config(&cfg.reliability),
            receiver: Receiver::new(cfg.receiver.clone())?,
            metrics: MetricsRecorder::new(cfg.duration),
            target_bps: cfg.encoder.target_bitrate as f64,
            scenario,
            cfg,
            encoder,
            packetizer,
            pacer,
            links,
            reverse,
            multihome,
            tcp,
            segments: BTreeMap::new(),
            next_seg: 0,
            controller,
            consumer: TwccConsumer::new(),
            send_log: BTreeMap::new(),
            next_transport_seq: 0,
            rtt: None,
            pacer_wake: None,
            playout_wake: None,
            frame_packets: BTreeMap::new(),
            counters: Counters::default(),
            octets_sent: 0,
            feedback_count: [0; 4],
            decisions: Vec::new(),
            window_goodput: 0,
        };
        Ok(Self { sched, state })
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn duration(&self) -> SimTime {
        self.state.cfg.duration
    }

    pub fn scenario(&self) -> &Scenario {
        &self.state.scenario
    }

    pub fn counters(&self) -> Counters {
        let mut c = self.state.counters;
        c.fwd.in_flight_at_end = self.in_flight();
        c
    }

    pub fn rtt(&self) -> Option<SimTime> {
        self.state.rtt
    }

    pub fn jitter_us(&self) -> f64 {
        self.state.receiver.jitter_us()
    }

    pub fn target_bps(&self) -> f64 {
        self.state.target_bps
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.state.decisions
    }

    /// First-copy media payload bytes that arrived since the previous call.
    pub fn take_window_goodput(&mut self) -> u64 {
        std::mem::take(&mut self.state.window_goodput)
    }

    /// Applies an externally chosen rate right away.
    pub fn apply_external(&mut self, bps: f64) -> Result<f64> {
        let now = self.sched.now();
        self.state.controller.set_external(bps);
        let d = self.state.controller.decide(now);
        self.state.apply_rate(d.target_bps, d.region, now)
    }

    /// Processes every event up to and including `t`.
    pub fn run_to(&mut self, t: SimTime) -> Result<()> {
        let t = t.min(self.state.cfg.duration);
        if t < self.sched.now() {
            return Ok(());
        }
        run_until(&mut self.state, &mut self.sched, t)?;
        Ok(())
    }

    fn in_flight(&self) -> u64 {
        self.sched
            .iter_pending()
            .filter(|e| matches!(e.kind, Ev::Arrival(_) | Ev::TcpArrival(_)))
            .count() as u64
    }

    pub fn run(mut self) -> Result<RunReport> {
        let end = self.state.cfg.duration;
        self.run_to(end)?;
        self.finish()
    }

    /// Builds the report from the state reached so far.
    pub fn finish(self) -> Result<RunReport> {
        let in_flight = self.in_flight();
        let events = self.sched.processed();
        let s = self.state;
        let duration = s.cfg.duration;
        let rows = s.metrics.rows(duration);
        let mut fwd = s.counters.fwd;
        fwd.in_flight_at_end = in_flight;
        let rstats = s.receiver.stats();
        let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Option<Stat> {
            Stat::of(&rows.iter().filter_map(f).collect::<Vec<_>>())
        };
        let c = &s.counters;
        let pct = |a: u64, b: u64| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let playout_plr = pct(c.playout_lost, c.playout_expected);
        let net_dropped = fwd.dropped_queue + fwd.dropped_random + fwd.dropped_range;
        let summary = RunSummary {
            scenario: s.scenario.name.clone(),
            seed: s.scenario.seed,
            controller: s.controller.name().to_string(),
            transport: match s.scenario.transport {
                TransportMode::Udp => "udp".into(),
                TransportMode::Tcp => "tcp".into(),
            },
            duration_s: duration.as_secs_f64(),
            config_digest: config_digest(&s.scenario),
            csv_schema_version: CSV_SCHEMA_VERSION,
            start_rate_bps: s.scenario.controller.start_rate_bps,
            keyframe_size_ratio: s.cfg.encoder.keyframe_size_ratio,
            rx_total_mbytes: c.rx_bytes as f64 / 1e6,
            rx_rate_mbps: col(&|r| Some(r.rx_rate_mbps)),
            goodput_mbps: col(&|r| Some(r.goodput_mbps)),
            target_bitrate_mbps: col(&|r| Some(r.target_bitrate_mbps)),
            rtt_ms: col(&|r| r.rtt_ms),
            latency_total_ms: col(&|r| {
                Some(
                    r.latency_processing_ms?
                        + r.latency_queuing_ms?
                        + r.latency_transmission_ms?
                        + r.latency_decoding_ms?,
                )
            }),
            playout_plr_pct: playout_plr,
            plr_band: plr_band(playout_plr).into(),
            network_plr_pct: pct(net_dropped, fwd.packets_sent),
            rtx_rate_pct: pct(c.rtx_sent, c.media_sent),
            frames_played: c.frames_played,
            frames_skipped: c.frames_skipped,
            frames_undecodable: rstats.frames_undecodable,
            stall_total_ms: rstats.stall_total.as_millis_f64(),
            keyframe_requests: rstats.keyframe_requests,
            media_packets_sent: c.media_sent,
            retransmitted: c.rtx_sent,
            fec_packets_sent: c.fec_sent,
            repaired: rstats.recovered,
            nack_requests: rstats.nacked_seqs,
            feedback_sent: c.feedback_sent,
            feedback_lost: c.feedback_lost,
            transport_reorders: rstats.transport_reorders,
            release_violations: rstats.release_violations,
            conservation: fwd,
            conservation_holds: fwd.holds(),
            events_processed: events,
        };
        Ok(RunReport {
            summary,
            rows,
            decisions: s.decisions,
            config_echo: s.scenario.to_json(),
        })
    }

    pub fn receiver_stats(&self) -> crate::receiver::ReceiverStats {
        self.state.receiver.stats()
    }

    pub fn nack_stats(&self) -> crate::reliability::NackStats {
        self.state.rtx.stats()
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    Session::new(scenario, opts)?.run()
}

impl World for State {
    type Kind = Ev;

    fn handle(&mut self, sched: &mut Scheduler<Ev>, now: SimTime, kind: Ev) -> Result<(), String> {
        match kind {
            Ev::Control => {
                let d = self.controller.decide(now);
                self.apply_rate(d.target_bps, d.region, now)
                    .map_err(|e| e.to_string())?;
                sched.schedule_in(self.cfg.decision_interval, Ev::Control);
            }
            Ev::Capture(n) => {
                let frame = self.encoder.emit_frame(now);
                sched.schedule_in(frame.encode_done_time - now, Ev::Packetize(frame));
                let next = capture_offset(n + 1, self.cfg.encoder.fps);
                if next <= self.cfg.duration {
                    sched.schedule_in(next - now, Ev::Capture(n + 1));
                }
            }
            Ev::Packetize(frame) => {
                let packets = self.packetizer.packetize(&frame).map_err(|e| e.to_string())?;
                self.frame_packets.insert(frame.frame_id, packets.len() as u64);
                for mut p in packets {
                    p.enqueue_time = now;
                    let parity = self.fec.push(&p);
                    self.pacer.enqueue(p);
                    if let Some(mut f) = parity {
                        f.enqueue_time = now;
                        self.pacer.enqueue(f);
                    }
                }
                self.wake_pacer(sched, now);
            }
            Ev::PacerWake => {
                self.pacer_wake = None;
                if let Some(mut p) = self.pacer.release(now) {
                    p.transport_seq = self.next_transport_seq;
                    self.next_transport_seq += 1;
                    let bytes = p.wire_size();
                    if p.is_fec {
                        self.counters.fec_sent += 1;
                    } else if p.is_retransmission {
                        self.counters.rtx_sent += 1;
                    } else {
                        self.counters.media_sent += 1;
                        self.rtx.store(&p, now);
                    }
                    self.octets_sent += p.payload_size as u64;
                    self.send_log.insert(p.transport_seq, (now, bytes));
                    let key = if p.is_fec {
                        mix_key(&[KEY_FEC, p.frame_id, p.stream_seq as u64])
                    } else {
                        mix_key(&[KEY_MEDIA, p.frame_id, p.stream_seq as u64, p.rtx_attempt as u64])
                    };
                    let fwd = Forward {
                        payload: Payload::Rtp(Box::new(p)),
                        bytes,
                        fb_ack: self.consumer.highest_feedback_seq(),
                    };
                    self.send_forward(sched, fwd, now, key);
                }
                self.wake_pacer(sched, now);
            }
            Ev::Arrival(fwd) => {
                self.counters.fwd.delivered += 1;
                self.deliver(sched, *fwd, now);
            }
            Ev::TcpRetry { seg, attempt } => self.tcp_attempt(sched, seg, attempt, now),
            Ev::TcpArrival(seg) => {
                self.counters.fwd.delivered += 1;
                let pipe = self.tcp.as_mut().expect("tcp mode");
                for s in pipe.on_arrival(seg, now) {
                    let fwd = self.segments.remove(&s).expect("segment stored");
                    self.deliver(sched, fwd, now);
                }
            }
            Ev::NackTick => {
                let seqs = self.receiver.collect_nacks(now);
                if !seqs.is_empty() {
                    let size = 12 + 4 * seqs.len();
                    self.send_feedback(sched, FeedbackMsg::Nack(seqs), size, now);
                }
                sched.schedule_in(self.cfg.receiver.nack_tick(), Ev::NackTick);
            }
            Ev::PlayoutWake(t) => {
                if self.playout_wake == Some(t) {
                    self.playout_wake = None;
                }
                self.poll_playout(sched, now);
            }
            Ev::TwccTick => {
                if let Some(fb) = self.receiver.twcc().build(now) {
                    let size = fb.wire_size();
                    self.send_feedback(sched, FeedbackMsg::Twcc(Box::new(fb)), size, now);
                }
                sched.schedule_in(self.cfg.feedback.twcc_period, Ev::TwccTick);
            }
            Ev::RrTick => {
                if self.receiver.reception().expected() > 0 {
                    let rr = self.receiver.reception().build_report(now);
                    self.send_feedback(sched, FeedbackMsg::Rr(rr), RR_BYTES, now);
                }
                sched.schedule_in(self.cfg.feedback.rr_period, Ev::RrTick);
            }
            Ev::SrTick => {
                let sr = SenderReport {
                    send_time: now,
                    packets_sent: self.counters.media_sent + self.counters.rtx_sent + self.counters.fec_sent,
                    octets_sent: self.octets_sent,
                };
                self.counters.sr_sent += 1;
                let key = mix_key(&[KEY_SR, self.counters.sr_sent]);
                let fwd = Forward {
                    payload: Payload::Sr(sr),
                    bytes: SR_BYTES,
                    fb_ack: None,
                };
                self.send_forward(sched, fwd, now, key);
                sched.schedule_in(self.cfg.feedback.rr_period, Ev::SrTick);
            }
            Ev::Feedback(msg) => self.on_feedback(sched, msg, now),
            Ev::Metrics => {
                self.metrics.sample(
                    now,
                    self.rtt,
                    self.target_bps,
                    self.counters.media_sent,
                    self.counters.rtx_sent,
                );
            }
        }
        Ok(())
    }
}

impl State {
    fn apply_rate(
        &mut self,
        bps: f64,
        region: Option<crate::rate_control::Region>,
        now: SimTime,
    ) -> Result<f64> {
        let applied = self.encoder.set_target_bitrate(bps)?;
        self.pacer.set_target_bitrate(applied);
        self.target_bps = applied as f64;
        self.decisions.push(DecisionRecord {
            t_us: now.0,
            target_bps: self.target_bps,
            region,
        });
        Ok(self.target_bps)
    }

    fn wake_pacer(&mut self, sched: &mut Scheduler<Ev>, now: SimTime) {
        if self.pacer_wake.is_some() {
            return;
        }
        if let Some(t) = self.pacer.next_release_time(now) {
            self.pacer_wake = Some(t);
            sched.schedule_in(t - now, Ev::PacerWake);
        }
    }

    fn send_forward(&mut self, sched: &mut Scheduler<Ev>, fwd: Forward, now: SimTime, key: u64) {
        if self.tcp.is_some() {
            let seg = self.next_seg;
            self.next_seg += 1;
            self.segments.insert(seg, fwd);
            self.tcp_attempt(sched, seg, 0, now);
            return;
        }
        self.counters.fwd.packets_sent += 1;
        let idx = match self.multihome.as_mut() {
            Some(mh) => {
                let up = [self.links[0].available(now), self.links[1].available(now)];
                match mh.split(up) {
                    Some(i) => i,
                    None => {
                        self.counters.fwd.dropped_range += 1;
                        return;
                    }
                }
            }
            None => 0,
        };
        match self.links[idx].transmit(fwd.bytes, now, key) {
            Outcome::Delivered { tx_start, arrival } => {
                let mut fwd = fwd;
                if let Payload::Rtp(p) = &mut fwd.payload {
                    p.tx_start_time = tx_start;
                }
                sched.schedule_in(arrival - now, Ev::Arrival(Box::new(fwd)));
            }
            Outcome::Dropped(r) => self.count_drop(r),
        }
    }

    fn count_drop(&mut self, r: DropReason) {
        let c = &mut self.counters.fwd;
        match r {
            DropReason::QueueOverflow => c.dropped_queue += 1,
            DropReason::Random => c.dropped_random += 1,
            DropReason::OutOfRange => c.dropped_range += 1,
        }
    }

    fn tcp_attempt(&mut self, sched: &mut Scheduler<Ev>, seg: u64, attempt: u32, now: SimTime) {
        self.counters.fwd.packets_sent += 1;
        let bytes = self.segments[&seg].bytes;
        let pipe = self.tcp.as_mut().expect("tcp mode");
        match pipe.send(&mut self.links[0], seg, attempt, bytes, now) {
            TcpAttempt::Arrives { tx_start, arrival } => {
                if let Some(Forward {
                    payload: Payload::Rtp(p),
                    ..
                }) = self.segments.get_mut(&seg)
                {
                    p.tx_start_time = tx_start;
                }
                sched.schedule_in(arrival - now, Ev::TcpArrival(seg));
            }
            TcpAttempt::Retry { retry_at, reason } => {
                self.count_drop(reason);
                sched.schedule_in(retry_at - now, Ev::TcpRetry {
                    seg,
                    attempt: attempt + 1,
                });
            }
        }
    }

    fn deliver(&mut self, sched: &mut Scheduler<Ev>, fwd: Forward, now: SimTime) {
        self.metrics.on_delivery(now, fwd.bytes);
        self.counters.rx_bytes += fwd.bytes as u64;
        if let Some(a) = fwd.fb_ack {
            self.receiver.twcc().on_ack(a);
        }
        match fwd.payload {
            Payload::Rtp(p) => {
                let payload = p.payload_size as u64;
                let useful = !p.is_fec;
                if self.receiver.on_packet(*p, now) == Disposition::Accepted && useful {
                    self.window_goodput += payload;
                }
                self.poll_playout(sched, now);
            }
            Payload::Sr(sr) => self.receiver.reception().on_sender_report(&sr, now),
        }
    }

    fn poll_playout(&mut self, sched: &mut Scheduler<Ev>, now: SimTime) {
        let res = self.receiver.poll(now);
        for o in res.outcomes {
            let id = o.frame_id();
            let count = self.frame_packets.remove(&id).unwrap_or(0);
            match o {
                PlayoutOutcome::Played {
                    play_time,
                    latency,
                    stall,
                    payload_arrivals,
                    ..
                } => {
                    self.metrics.on_played(
                        play_time,
                        stall,
                        [latency.processing, latency.queuing, latency.transmission, latency.decoding],
                    );
                    self.metrics.on_decided(play_time, 0, count);
                    for (arrival, bytes) in payload_arrivals {
                        self.metrics.on_goodput(arrival, bytes);
                        self.counters.goodput_bytes += bytes as u64;
                    }
                    self.counters.frames_played += 1;
                    self.counters.playout_expected += count;
                }
                PlayoutOutcome::Skipped {
                    decided_at,
                    reason,
                    lost,
                    ..
                } => {
                    let lost = match reason {
                        SkipReason::Undecodable => 0,
                        _ => lost.unwrap_or(count),
                    };
                    self.metrics.on_skipped(decided_at);
                    self.metrics.on_decided(decided_at, lost, count);
                    self.counters.frames_skipped += 1;
                    self.counters.playout_lost += lost;
                    self.counters.playout_expected += count;
                }
            }
        }
        if res.keyframe_request {
            self.send_feedback(sched, FeedbackMsg::Pli, PLI_BYTES, now);
        }
        if let Some(w) = res.next_wake {
            if self.playout_wake.is_none_or(|p| w < p) && w <= self.cfg.duration {
                self.playout_wake = Some(w);
                sched.schedule_in(w - now, Ev::PlayoutWake(w));
            }
        }
    }

    fn send_feedback(&mut self, sched: &mut Scheduler<Ev>, msg: FeedbackMsg, size: usize, now: SimTime) {
        self.counters.feedback_sent += 1;
        let kind = match msg {
            FeedbackMsg::Nack(_) => 0,
            FeedbackMsg::Pli => 1,
            FeedbackMsg::Twcc(_) => 2,
            FeedbackMsg::Rr(_) => 3,
        };
        self.feedback_count[kind] += 1;
        let key = mix_key(&[KEY_FEEDBACK, kind as u64, self.feedback_count[kind]]);
        let reverse = &mut self.reverse;
        let arrival = deliver_feedback(now, self.cfg.feedback.no_cost, || {
            match reverse.transmit(size, now, key) {
                Outcome::Delivered { arrival, .. } => Some(arrival),
                Outcome::Dropped(_) => None,
            }
        });
        match arrival {
            Some(t) => {
                sched.schedule_in(t - now, Ev::Feedback(msg));
            }
            None => self.counters.feedback_lost += 1,
        }
    }

    fn on_feedback(&mut self, sched: &mut Scheduler<Ev>, msg: FeedbackMsg, now: SimTime) {
        match msg {
            FeedbackMsg::Nack(seqs) => {
                let rtt = self.rtt.unwrap_or(DEFAULT_RTT);
                for p in self.rtx.handle_nack(&seqs, now, rtt, self.target_bps) {
                    self.pacer.enqueue_priority(p);
                }
                self.wake_pacer(sched, now);
            }
            FeedbackMsg::Pli => self.encoder.request_keyframe(),
            FeedbackMsg::Twcc(fb) => {
                let results: Vec<PacketResult> = self
                    .consumer
                    .consume(&fb)
                    .into_iter()
                    .filter_map(|(seq, arrival)| {
                        let &(send_time, size) = self.send_log.get(&seq)?;
                        Some(PacketResult {
                            transport_seq: seq,
                            send_time,
                            size,
                            arrival,
                        })
                    })
                    .collect();
                self.send_log = self.send_log.split_off(&self.consumer.consumed_until());
                self.controller.on_twcc(&results, now);
            }
            FeedbackMsg::Rr(rr) => {
                let rtt = compute_rtt(&rr, now);
                if rtt.is_some() {
                    self.rtt = rtt;
                }
                self.controller.on_rr(&rr, rtt, now);
            }
        }
    }
}
