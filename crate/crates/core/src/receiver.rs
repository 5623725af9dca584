//! Receiver: loss detection and NACK generation, FEC repair, frame assembly
//! and deadline-driven playout with per-frame latency accounting.
//!
//! Playout follows the capture cadence: frame `n` is due at
//! `capture(n) + playout_delay`. Stalls accumulate: a frame may be as late as
//! the previous one was, plus `stall_allowance`. A frame still incomplete (or
//! completing too late) after that is skipped and its missing packets count
//! as lost at playout. Frames play as soon as they are due, so the clock
//! catches up once the path recovers.
//!
//! After a skip the decoder needs a keyframe: a keyframe request goes out and
//! complete delta frames are dropped as undecodable until one arrives. Since
//! nothing can play meanwhile, that keyframe may wait up to `MAX_LAG`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::ConfigError;
use crate::feedback::{ReceptionStats, TwccRecorder};
use crate::media::capture_offset;
use crate::packetizer::RtpPacket;
use crate::reliability::{recover_single, SeqUnwrapper, RTX_SEQ_SPAN};
use crate::sim::SimTime;

pub const MAX_MISSING: usize = 1000;
const PLI_REPEAT: SimTime = SimTime::from_millis(500);
/// Longest accumulated stall before frames age out.
pub const MAX_LAG: SimTime = SimTime::from_secs(1);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReceiverConfig {
    pub fps: u32,
    pub playout_delay: SimTime,
    pub stall_allowance: SimTime,
    pub nack_enabled: bool,
    pub nack_interval: SimTime,
    pub nack_max_count: u32,
    pub decode_latency: SimTime,
    pub keyframe_request_enabled: bool,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            fps: 20,
            playout_delay: SimTime::from_millis(200),
            stall_allowance: SimTime::from_millis(50),
            nack_enabled: true,
            nack_interval: SimTime::from_millis(20),
            nack_max_count: 10,
            decode_latency: SimTime::from_millis(1),
            keyframe_request_enabled: true,
        }
    }
}

impl ReceiverConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fps == 0 {
            return Err(ConfigError::new("encoder.fps", "must be > 0"));
        }
        if self.nack_interval == SimTime::ZERO {
            return Err(ConfigError::new("receiver.nack_interval_ms", "must be > 0"));
        }
        if self.playout_delay == SimTime::ZERO {
            return Err(ConfigError::new("receiver.playout_delay_ms", "must be > 0"));
        }
        Ok(())
    }

    /// Period of the NACK timer.
    pub fn nack_tick(&self) -> SimTime {
        SimTime((self.nack_interval.0 / 4).max(1_000))
    }

    pub fn target_time(&self, frame_id: u64) -> SimTime {
        capture_offset(frame_id, self.fps) + self.playout_delay
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LatencyBreakdown {
    pub processing: SimTime,
    pub queuing: SimTime,
    pub transmission: SimTime,
    pub decoding: SimTime,
}

impl LatencyBreakdown {
    pub fn total(&self) -> SimTime {
        self.processing + self.queuing + self.transmission + self.decoding
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Incomplete at the deadline.
    Missing,
    /// Complete, but too late to decode in time.
    Late,
    /// Complete, but the decoder is waiting for a keyframe.
    Undecodable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlayoutOutcome {
    Played {
        frame_id: u64,
        play_time: SimTime,
        latency: LatencyBreakdown,
        stall: SimTime,
        /// `(arrival, payload bytes)` of each packet's first delivery.
        payload_arrivals: Vec<(SimTime, usize)>,
    },
    Skipped {
        frame_id: u64,
        decided_at: SimTime,
        reason: SkipReason,
        /// Packets of this frame lost at playout, when any part of it arrived.
        lost: Option<u64>,
    },
}

impl PlayoutOutcome {
    pub fn frame_id(&self) -> u64 {
        match self {
            PlayoutOutcome::Played { frame_id, .. } | PlayoutOutcome::Skipped { frame_id, .. } => {
                *frame_id
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PollResult {
    pub outcomes: Vec<PlayoutOutcome>,
    /// Packets lost at playout and packets expected, for decisions made in this poll.
    pub lost: u64,
    pub expected: u64,
    pub keyframe_request: bool,
    pub next_wake: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Accepted,
    Duplicate,
    /// Its frame was already decided.
    TooLate,
    Parity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ReceiverStats {
    pub packets_received: u64,
    pub media_received: u64,
    pub rtx_received: u64,
    pub fec_received: u64,
    pub recovered: u64,
    pub duplicates: u64,
    pub too_late: u64,
    pub frames_played: u64,
    pub frames_skipped: u64,
    pub frames_undecodable: u64,
    pub playout_expected: u64,
    pub playout_lost: u64,
    pub stall_total: SimTime,
    pub keyframe_requests: u64,
    pub nack_messages: u64,
    pub nacked_seqs: u64,
    pub max_nacks_per_seq: u32,
    pub min_nack_spacing: Option<SimTime>,
    pub max_missing_len: usize,
    pub missing_evicted: u64,
    pub release_violations: u64,
    pub transport_reorders: u64,
}

#[derive(Debug, Clone)]
struct Stored {
    payload_size: usize,
    arrival: SimTime,
    packet: RtpPacket,
}

#[derive(Debug, Clone)]
struct Assembly {
    first_ext: u64,
    count: u64,
    received: u64,
    is_keyframe: bool,
    capture: SimTime,
    encode_done: SimTime,
    complete: Option<(SimTime, SimTime)>, // (tx_start, arrival) of the completing packet
}

#[derive(Debug, Clone, Copy)]
struct MissingEntry {
    first_seen: SimTime,
    nack_count: u32,
    last_nack: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub struct Receiver {
    cfg: ReceiverConfig,
    unwrapper: SeqUnwrapper,
    packets: BTreeMap<u64, Stored>,
    frames: BTreeMap<u64, Assembly>,
    missing: BTreeMap<u64, MissingEntry>,
    highest: Option<u64>,
    parities: BTreeMap<u64, (RtpPacket, Vec<u64>)>,
    seq_groups: BTreeMap<u64, u64>,
    next_frame: u64,
    need_keyframe: bool,
    // lateness of the last played frame behind its nominal target
    lag: SimTime,
    last_play: SimTime,
    last_pli: Option<SimTime>,
    decided_end: Option<u64>,
    last_released: Option<u64>,
    max_transport: Option<u64>,
    stats: ReceiverStats,
    reception: ReceptionStats,
    twcc: TwccRecorder,
}

impl Receiver {
    pub fn new(cfg: ReceiverConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            unwrapper: SeqUnwrapper::default(),
            packets: BTreeMap::new(),
            frames: BTreeMap::new(),
            missing: BTreeMap::new(),
            highest: None,
            parities: BTreeMap::new(),
            seq_groups: BTreeMap::new(),
            next_frame: 0,
            need_keyframe: true,
            lag: SimTime::ZERO,
            last_play: SimTime::ZERO,
            last_pli: None,
            decided_end: None,
            last_released: None,
            max_transport: None,
            stats: ReceiverStats::default(),
            reception: ReceptionStats::new(),
            twcc: TwccRecorder::new(),
        })
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ReceiverStats {
        self.stats
    }

    pub fn missing_len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_missing(&self, seq: u16) -> bool {
        self.missing.contains_key(&self.unwrapper.peek(seq))
    }

    pub fn reception(&mut self) -> &mut ReceptionStats {
        &mut self.reception
    }

    pub fn twcc(&mut self) -> &mut TwccRecorder {
        &mut self.twcc
    }

    pub fn jitter_us(&self) -> f64 {
        self.reception.jitter_us()
    }

    pub fn next_frame(&self) -> u64 {
        self.next_frame
    }

    pub fn on_packet(&mut self, packet: RtpPacket, arrival: SimTime) -> Disposition {
        self.stats.packets_received += 1;
        self.twcc.on_packet(packet.transport_seq, arrival);
        if let Some(m) = self.max_transport {
            if packet.transport_seq < m {
                self.stats.transport_reorders += 1;
            }
        }
        self.max_transport = self.max_transport.max(Some(packet.transport_seq));

        if packet.is_fec {
            self.stats.fec_received += 1;
            self.on_parity(packet, arrival);
            return Disposition::Parity;
        }
        self.stats.media_received += 1;
        let ext = self.unwrapper.unwrap(packet.stream_seq);
        if packet.is_retransmission {
            self.stats.rtx_received += 1;
        } else {
            self.reception.on_packet(ext, packet.capture_time, arrival);
        }
        self.accept_media(packet, ext, arrival)
    }

    fn accept_media(&mut self, packet: RtpPacket, ext: u64, arrival: SimTime) -> Disposition {
        self.missing.remove(&ext);
        if self.decided_end.is_some_and(|d| ext < d) {
            self.stats.too_late += 1;
            return Disposition::TooLate;
        }
        if self.packets.contains_key(&ext) {
            self.stats.duplicates += 1;
            return Disposition::Duplicate;
        }
        self.track_gap(ext, arrival);

        let first_ext = ext - (packet.stream_seq.wrapping_sub(packet.frame_first_seq)) as u64;
        let asm = self.frames.entry(packet.frame_id).or_insert(Assembly {
            first_ext,
            count: packet.frame_packet_count as u64,
            received: 0,
            is_keyframe: packet.is_keyframe,
            capture: packet.capture_time,
            encode_done: packet.encode_done_time,
            complete: None,
        });
        asm.received += 1;
        if asm.received == asm.count {
            asm.complete = Some((packet.tx_start_time, arrival));
        }
        self.packets.insert(
            ext,
            Stored {
                payload_size: packet.payload_size,
                arrival,
                packet,
            },
        );
        if let Some(&group) = self.seq_groups.get(&ext) {
            self.try_fec_repair(group, arrival);
        }
        Disposition::Accepted
    }

    fn track_gap(&mut self, ext: u64, arrival: SimTime) {
        match self.highest {
            None => self.highest = Some(ext),
            Some(h) if ext > h => {
                let from = (h + 1).max(ext.saturating_sub(RTX_SEQ_SPAN));
                let from = from.max(ext.saturating_sub(MAX_MISSING as u64));
                for s in from..ext {
                    self.missing.insert(
                        s,
                        MissingEntry {
                            first_seen: arrival,
                            nack_count: 0,
                            last_nack: None,
                        },
                    );
                }
                self.highest = Some(ext);
                let cut = ext.saturating_sub(RTX_SEQ_SPAN);
                self.missing = self.missing.split_off(&cut);
                while self.missing.len() > MAX_MISSING {
                    self.missing.pop_first();
                    self.stats.missing_evicted += 1;
                }
                self.stats.max_missing_len = self.stats.max_missing_len.max(self.missing.len());
            }
            Some(_) => {}
        }
    }

    fn on_parity(&mut self, parity: RtpPacket, arrival: SimTime) {
        let Some(header) = parity.fec.as_ref() else {
            return;
        };
        let group = parity.fec_group_id.unwrap_or(parity.stream_seq as u64);
        let exts: Vec<u64> = header
            .covered_seqs
            .iter()
            .map(|s| self.unwrapper.peek(*s))
            .collect();
        if self.decided_end.is_some_and(|d| exts.iter().all(|e| *e < d)) {
            return;
        }
        for e in &exts {
            self.seq_groups.insert(*e, group);
        }
        self.parities.insert(group, (parity, exts));
        self.try_fec_repair(group, arrival);
    }

    /// Reconstructs the one missing packet of `group` if possible.
    pub fn try_fec_repair(&mut self, group: u64, now: SimTime) -> Option<u16> {
        let (parity, exts) = self.parities.get(&group)?;
        let missing: Vec<u64> = exts
            .iter()
            .copied()
            .filter(|e| !self.packets.contains_key(e))
            .collect();
        if missing.len() != 1 {
            return None;
        }
        let lost = missing[0];
        if self.decided_end.is_some_and(|d| lost < d) {
            return None;
        }
        let present: Vec<&RtpPacket> = exts
            .iter()
            .filter_map(|e| self.packets.get(e).map(|s| &s.packet))
            .collect();
        let recovered = recover_single(parity, &present)?;
        self.parities.remove(&group);
        self.stats.recovered += 1;
        let seq = recovered.stream_seq;
        self.accept_media(recovered, lost, now);
        Some(seq)
    }

    /// Runs the NACK timer; returns the seqs to request now.
    pub fn collect_nacks(&mut self, now: SimTime) -> Vec<u16> {
        if !self.cfg.nack_enabled {
            return Vec::new();
        }
        if let Some(d) = self.decided_end {
            self.missing = self.missing.split_off(&d);
        }
        let mut out = Vec::new();
        for (&ext, e) in self.missing.iter_mut() {
            if e.nack_count >= self.cfg.nack_max_count {
                continue;
            }
            // hold new gaps for one interval in case they were only reordered
            if now < e.first_seen + self.cfg.nack_interval {
                continue;
            }
            if let Some(last) = e.last_nack {
                if now - last < self.cfg.nack_interval {
                    continue;
                }
                let gap = now - last;
                self.stats.min_nack_spacing =
                    Some(self.stats.min_nack_spacing.map_or(gap, |m| m.min(gap)));
            }
            e.nack_count += 1;
            e.last_nack = Some(now);
            self.stats.max_nacks_per_seq = self.stats.max_nacks_per_seq.max(e.nack_count);
            out.push(ext as u16);
        }
        if !out.is_empty() {
            self.stats.nack_messages += 1;
            self.stats.nacked_seqs += out.len() as u64;
        }
        out
    }

    /// Decides every frame whose fate is known at `now`.
    pub fn poll(&mut self, now: SimTime) -> PollResult {
        let mut res = PollResult::default();
        loop {
            let n = self.next_frame;
            let target = self.cfg.target_time(n);
            let deadline = self.deadline(n);
            let decode = self.cfg.decode_latency;
            let state = self.frames.get(&n).map(|a| (a.complete, a.is_keyframe));
            match state {
                Some((Some((_, done)), is_key)) if done + decode <= deadline => {
                    let play = target.max(done + decode).max(self.last_play);
                    if now < play {
                        res.next_wake = Some(play);
                        break;
                    }
                    if self.need_keyframe && !is_key {
                        self.decide_skip(n, now, SkipReason::Undecodable, &mut res);
                    } else {
                        self.decide_play(n, play, target, &mut res);
                    }
                }
                _ => {
                    if now < deadline {
                        res.next_wake = Some(deadline);
                        break;
                    }
                    let reason = if state.is_some_and(|s| s.0.is_some()) {
                        SkipReason::Late
                    } else {
                        SkipReason::Missing
                    };
                    self.decide_skip(n, now, reason, &mut res);
                }
            }
        }
        res
    }

    /// Last moment frame `n` may be played.
    fn deadline(&self, n: u64) -> SimTime {
        let target = self.cfg.target_time(n);
        let resync = self.need_keyframe && self.frames.get(&n).is_some_and(|a| a.is_keyframe);
        if resync {
            target + MAX_LAG
        } else {
            target + (self.lag + self.cfg.stall_allowance).min(MAX_LAG)
        }
    }

    fn account_range(&mut self, asm: &Assembly, lost_in_frame: u64, res: &mut PollResult) {
        // frames that never produced a single packet show up as a seq gap
        let gap = match self.decided_end {
            Some(d) if asm.first_ext > d => asm.first_ext - d,
            _ => 0,
        };
        let lost = gap + lost_in_frame;
        let expected = gap + asm.count;
        self.stats.playout_lost += lost;
        self.stats.playout_expected += expected;
        res.lost += lost;
        res.expected += expected;
        self.decided_end = Some(asm.first_ext + asm.count);
    }

    fn prune(&mut self) {
        if let Some(d) = self.decided_end {
            self.packets = self.packets.split_off(&d);
            self.missing = self.missing.split_off(&d);
            self.seq_groups = self.seq_groups.split_off(&d);
            self.parities.retain(|_, (_, exts)| exts.iter().any(|e| *e >= d));
        }
        let next = self.next_frame;
        self.frames = self.frames.split_off(&next);
    }

    fn decide_play(&mut self, n: u64, play: SimTime, target: SimTime, res: &mut PollResult) {
        let asm = self.frames.remove(&n).expect("complete frame exists");
        let (tx_start, arrival) = asm.complete.expect("complete");
        let mut payload_arrivals = Vec::with_capacity(asm.count as usize);
        for ext in asm.first_ext..asm.first_ext + asm.count {
            if let Some(p) = self.packets.get(&ext) {
                payload_arrivals.push((p.arrival, p.payload_size));
            }
            if self.last_released.is_some_and(|l| ext <= l) {
                self.stats.release_violations += 1;
            }
            self.last_released = Some(ext);
        }
        if asm.is_keyframe {
            self.need_keyframe = false;
        }
        let latency = LatencyBreakdown {
            processing: asm.encode_done - asm.capture,
            queuing: tx_start.saturating_sub(asm.encode_done),
            transmission: arrival - tx_start.min(arrival),
            decoding: play - arrival,
        };
        debug_assert_eq!(latency.total(), play - asm.capture);
        let late = play - target;
        let stall = late.saturating_sub(self.lag);
        self.lag = late.min(MAX_LAG);
        self.last_play = play;
        self.stats.frames_played += 1;
        self.stats.stall_total += stall;
        self.account_range(&asm, 0, res);
        self.next_frame = n + 1;
        self.prune();
        res.outcomes.push(PlayoutOutcome::Played {
            frame_id: n,
            play_time: play,
            latency,
            stall,
            payload_arrivals,
        });
    }

    fn decide_skip(&mut self, n: u64, now: SimTime, reason: SkipReason, res: &mut PollResult) {
        let mut frame_lost = None;
        let cutoff = self.deadline(n).saturating_sub(self.cfg.decode_latency);
        if let Some(asm) = self.frames.remove(&n) {
            let lost = match reason {
                SkipReason::Undecodable => 0,
                SkipReason::Missing => asm.count - asm.received,
                SkipReason::Late => {
                    // the packets that showed up after the frame's last useful moment
                    (asm.first_ext..asm.first_ext + asm.count)
                        .filter(|e| self.packets.get(e).is_none_or(|p| p.arrival > cutoff))
                        .count() as u64
                }
            };
            self.account_range(&asm, lost, res);
            frame_lost = Some(lost);
        }
        if reason == SkipReason::Undecodable {
            self.stats.frames_undecodable += 1;
        } else {
            self.need_keyframe = true;
        }
        self.stats.frames_skipped += 1;
        if self.need_keyframe
            && self.cfg.keyframe_request_enabled
            && self.last_pli.is_none_or(|t| now - t >= PLI_REPEAT)
        {
            self.last_pli = Some(now);
            self.stats.keyframe_requests += 1;
            res.keyframe_request = true;
        }
        self.next_frame = n + 1;
        self.prune();
        res.outcomes.push(PlayoutOutcome::Skipped {
            frame_id: n,
            decided_at: now,
            reason,
            lost: frame_lost,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::MediaFrame;
    use crate::packetizer::{Packetizer, RtpConfig};
    use crate::reliability::{FecConfig, FecEncoder};

    fn frames(n: u64, size: usize) -> Vec<Vec<RtpPacket>> {
        let mut p = Packetizer::new(RtpConfig::default(), 0, 0).unwrap();
        (0..n)
            .map(|i| {
                let cap = capture_offset(i, 20);
                let mut v = p
                    .packetize(&MediaFrame {
                        frame_id: i,
                        capture_time: cap,
                        encode_done_time: cap + SimTime(1000),
                        size,
                        is_keyframe: i == 0,
                    })
                    .unwrap();
                for (k, pk) in v.iter_mut().enumerate() {
                    pk.tx_start_time = cap + SimTime(1000 + k as u64 * 100);
                    pk.transport_seq = i * 100 + k as u64;
                }
                v
            })
            .collect()
    }

    fn rx() -> Receiver {
        Receiver::new(ReceiverConfig::default()).unwrap()
    }

    #[test]
    fn gap_schedules_nack_after_hold() {
        let mut r = rx();
        let f = frames(1, 1230 * 5);
        for i in [0usize, 1, 3] {
            r.on_packet(f[0][i].clone(), SimTime(i as u64 * 100));
        }
        assert!(r.collect_nacks(SimTime(5_000)).is_empty());
        assert_eq!(r.collect_nacks(SimTime(20_300)), vec![2]);
    }

    #[test]
    fn reordered_packet_suppresses_nack() {
        let mut r = rx();
        let f = frames(1, 1230 * 5);
        r.on_packet(f[0][0].clone(), SimTime(0));
        r.on_packet(f[0][2].clone(), SimTime(100));
        r.on_packet(f[0][1].clone(), SimTime(5_000));
        assert!(r.collect_nacks(SimTime(30_000)).is_empty());
    }

    #[test]
    fn nack_cap_and_spacing() {
        let mut r = rx();
        let f = frames(1, 1230 * 3);
        r.on_packet(f[0][0].clone(), SimTime(0));
        r.on_packet(f[0][2].clone(), SimTime(0));
        let mut sent = 0;
        for ms in 0..400u64 {
            sent += r.collect_nacks(SimTime(ms * 1000)).len();
        }
        assert_eq!(sent, 10);
        let s = r.stats();
        assert_eq!(s.max_nacks_per_seq, 10);
        assert!(s.min_nack_spacing.unwrap() >= SimTime::from_millis(20));
    }

    #[test]
    fn missing_list_is_capped() {
        let mut r = rx();
        let f = frames(1, 10);
        let mut a = f[0][0].clone();
        r.on_packet(a.clone(), SimTime(0));
        a.stream_seq = 5000;
        r.on_packet(a, SimTime(1));
        assert_eq!(r.missing_len(), MAX_MISSING);
        assert!(r.stats().max_missing_len <= MAX_MISSING);
    }

    #[test]
    fn fec_repair_removes_pending_nack() {
        let mut r = rx();
        let f = frames(1, 1230 * 4);
        let mut enc = FecEncoder::new(
            FecConfig {
                enabled: true,
                ..Default::default()
            },
            0,
        );
        let parity: Vec<_> = f[0].iter().filter_map(|p| enc.push(p)).collect();
        assert_eq!(parity.len(), 1);
        r.on_packet(f[0][0].clone(), SimTime(0));
        r.on_packet(f[0][2].clone(), SimTime(10));
        r.on_packet(f[0][3].clone(), SimTime(20));
        assert!(r.is_missing(f[0][1].stream_seq));
        r.on_packet(parity[0].clone(), SimTime(30));
        assert!(!r.is_missing(f[0][1].stream_seq));
        assert_eq!(r.stats().recovered, 1);
        assert!(r.collect_nacks(SimTime(100_000)).is_empty());
    }

    #[test]
    fn two_losses_not_repaired() {
        let mut r = rx();
        let f = frames(1, 1230 * 4);
        let mut enc = FecEncoder::new(
            FecConfig {
                enabled: true,
                ..Default::default()
            },
            0,
        );
        let parity: Vec<_> = f[0].iter().filter_map(|p| enc.push(p)).collect();
        r.on_packet(f[0][0].clone(), SimTime(0));
        r.on_packet(f[0][3].clone(), SimTime(20));
        r.on_packet(parity[0].clone(), SimTime(30));
        assert_eq!(r.stats().recovered, 0);
    }

    #[test]
    fn on_time_frames_play_with_exact_breakdown() {
        let mut r = rx();
        let fs = frames(3, 2000);
        let mut played = Vec::new();
        for f in &fs {
            for p in f {
                let arr = p.tx_start_time + SimTime::from_millis(15);
                r.on_packet(p.clone(), arr);
            }
        }
        let res = r.poll(SimTime::from_secs(1));
        for o in res.outcomes {
            if let PlayoutOutcome::Played { latency, play_time, frame_id, .. } = o {
                let cap = capture_offset(frame_id, 20);
                assert_eq!(latency.total(), play_time - cap);
                assert_eq!(play_time, cap + SimTime::from_millis(200));
                assert_eq!(latency.processing, SimTime(1000));
                played.push(frame_id);
            }
        }
        assert_eq!(played, vec![0, 1, 2]);
        assert_eq!(r.stats().playout_lost, 0);
    }

    #[test]
    fn late_packet_skips_frame() {
        let mut r = rx();
        let fs = frames(2, 3000);
        for p in &fs[0] {
            r.on_packet(p.clone(), SimTime::from_millis(20));
        }
        let cap = capture_offset(1, 20);
        r.on_packet(fs[1][0].clone(), cap + SimTime::from_millis(20));
        r.on_packet(fs[1][1].clone(), cap + SimTime::from_millis(20));
        r.on_packet(fs[1][2].clone(), cap + SimTime::from_millis(300));
        let res = r.poll(cap + SimTime::from_millis(300));
        assert!(matches!(res.outcomes[0], PlayoutOutcome::Played { .. }));
        assert!(matches!(
            res.outcomes[1],
            PlayoutOutcome::Skipped {
                reason: SkipReason::Late,
                ..
            }
        ));
        assert_eq!(res.lost, 1);
        assert!(res.keyframe_request);
    }

    #[test]
    fn skipped_keyframe_blocks_deltas_until_next_keyframe() {
        let mut r = rx();
        let fs = frames(4, 2000);
        // frame 0 (keyframe) loses one packet
        for (i, f) in fs.iter().enumerate() {
            for (k, p) in f.iter().enumerate() {
                if i == 0 && k == 1 {
                    continue;
                }
                r.on_packet(p.clone(), p.tx_start_time + SimTime::from_millis(10));
            }
        }
        // a fresh decoder waits up to MAX_LAG for its first keyframe
        let res = r.poll(SimTime::from_millis(1250));
        let reasons: Vec<_> = res
            .outcomes
            .iter()
            .take(4)
            .map(|o| match o {
                PlayoutOutcome::Skipped { reason, .. } => Some(*reason),
                _ => None,
            })
            .collect();
        assert_eq!(
            reasons,
            vec![
                Some(SkipReason::Missing),
                Some(SkipReason::Undecodable),
                Some(SkipReason::Undecodable),
                Some(SkipReason::Undecodable)
            ]
        );
        assert_eq!(res.lost, 1);
        assert!(res.keyframe_request);
    }

    #[test]
    fn late_keyframe_resyncs_and_clock_catches_up() {
        let mut r = rx();
        let fs = frames(8, 2000);
        for p in &fs[0] {
            r.on_packet(p.clone(), SimTime::from_millis(20));
        }
        // frame 1 never arrives; frame 2 is a keyframe 400 ms late
        let mut kf = fs[2].clone();
        for p in &mut kf {
            p.is_keyframe = true;
        }
        let cap2 = capture_offset(2, 20);
        for p in &kf {
            r.on_packet(p.clone(), cap2 + SimTime::from_millis(600));
        }
        let res = r.poll(cap2 + SimTime::from_millis(601));
        let ids: Vec<_> = res
            .outcomes
            .iter()
            .map(|o| (o.frame_id(), matches!(o, PlayoutOutcome::Played { .. })))
            .collect();
        assert_eq!(ids, vec![(0, true), (1, false), (2, true)]);
        let PlayoutOutcome::Played { stall, play_time, .. } = &res.outcomes[2] else { panic!() };
        assert_eq!(*play_time, cap2 + SimTime::from_millis(601));
        assert_eq!(*stall, SimTime::from_millis(401));
        // frame 3 may now be as late as the keyframe was, plus the allowance
        let cap3 = capture_offset(3, 20);
        for p in &fs[3] {
            r.on_packet(p.clone(), cap3 + SimTime::from_millis(500));
        }
        // frame 4 is on time again
        let cap4 = capture_offset(4, 20);
        for p in &fs[4] {
            r.on_packet(p.clone(), cap4 + SimTime::from_millis(20));
        }
        // neither can play before the keyframe did
        let resumed = cap2 + SimTime::from_millis(601);
        let res = r.poll(resumed);
        let played: Vec<_> = res
            .outcomes
            .iter()
            .filter_map(|o| match o {
                PlayoutOutcome::Played { frame_id, play_time, .. } => Some((*frame_id, *play_time)),
                _ => None,
            })
            .collect();
        assert_eq!(
            played,
            vec![(3, resumed), (4, resumed)]
        );
        assert_eq!(r.stats().frames_skipped, 1);
    }

    #[test]
    fn released_order_strictly_increasing_under_reorder() {
        let mut r = rx();
        let fs = frames(10, 5000);
        let mut all: Vec<RtpPacket> = fs.into_iter().flatten().collect();
        // swap neighbours to emulate two paths
        for pair in all.chunks_mut(2) {
            pair.reverse();
        }
        for p in all {
            let arr = p.tx_start_time + SimTime::from_millis(12);
            r.on_packet(p, arr);
        }
        let res = r.poll(SimTime::from_millis(720));
        assert_eq!(res.outcomes.len(), 10);
        assert_eq!(r.stats().release_violations, 0);
        assert!(r.stats().transport_reorders > 0);
    }

    #[test]
    fn entirely_lost_frame_counted_via_gap() {
        let mut r = rx();
        let fs = frames(3, 2460);
        for (i, f) in fs.iter().enumerate() {
            if i == 1 {
                continue;
            }
            for p in f {
                r.on_packet(p.clone(), p.tx_start_time + SimTime(100));
            }
        }
        r.poll(SimTime::from_secs(2));
        let s = r.stats();
        assert_eq!(s.playout_expected, 6);
        assert_eq!(s.playout_lost, 2);
    }
}
