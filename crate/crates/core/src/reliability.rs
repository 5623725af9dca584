//! Sender-side loss repair: the retransmission buffer that answers NACKs and
//! the single-parity XOR FEC encoder with stronger keyframe protection.

use std::collections::{BTreeMap, VecDeque};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::packetizer::RtpPacket;
use crate::sim::SimTime;

pub const MAX_RETRANSMISSIONS: u32 = 10;
pub const RTX_SEQ_SPAN: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityConfig {
    pub nack_enabled: bool,
    pub fec_enabled: bool,
    pub fec_group_delta: usize,
    pub fec_group_key: usize,
    pub rtx_age: SimTime,
    pub rtx_bandwidth_fraction: f64,
    pub rtx_max_count: u32,
    /// A packet is not resent again within this fraction of the RTT.
    pub rtx_rtt_gate: f64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            nack_enabled: true,
            fec_enabled: false,
            fec_group_delta: 10,
            fec_group_key: 4,
            rtx_age: SimTime::from_secs(1),
            rtx_bandwidth_fraction: 0.25,
            rtx_max_count: MAX_RETRANSMISSIONS,
            rtx_rtt_gate: 1.0,
        }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fec().validate()?;
        if !(self.rtx_rtt_gate >= 0.0 && self.rtx_rtt_gate <= 1.0) {
            return Err(ConfigError::new("reliability.rtx_rtt_gate", "must be in [0, 1]"));
        }
        if !(self.rtx_bandwidth_fraction > 0.0 && self.rtx_bandwidth_fraction <= 1.0) {
            return Err(ConfigError::new(
                "reliability.rtx_bandwidth_fraction",
                "must be in (0, 1]",
            ));
        }
        if self.rtx_age == SimTime::ZERO {
            return Err(ConfigError::new("reliability.rtx_age_ms", "must be > 0"));
        }
        Ok(())
    }

    pub fn fec(&self) -> FecConfig {
        FecConfig {
            enabled: self.fec_enabled,
            group_size_delta: self.fec_group_delta,
            group_size_key: self.fec_group_key,
        }
    }
}

/// Maps 16-bit sequence numbers onto a monotone 64-bit axis.
#[derive(Debug, Clone, Default)]
pub struct SeqUnwrapper {
    last: Option<u64>,
}

impl SeqUnwrapper {
    /// Unwraps `seq` to the extended value closest to the previous one and remembers it
    /// if it is the newest seen so far.
    pub fn unwrap(&mut self, seq: u16) -> u64 {
        let ext = self.peek(seq);
        if self.last.is_none_or(|l| ext > l) {
            self.last = Some(ext);
        }
        ext
    }

    /// Unwraps without updating state.
    pub fn peek(&self, seq: u16) -> u64 {
        match self.last {
            None => seq as u64 + (1 << 16),
            Some(last) => unwrap_near(seq, last),
        }
    }

    pub fn newest(&self) -> Option<u64> {
        self.last
    }
}

/// Extended value of `seq` closest to `reference`.
pub fn unwrap_near(seq: u16, reference: u64) -> u64 {
    let ref_low = (reference & 0xFFFF) as u16;
    let diff = seq.wrapping_sub(ref_low) as i16 as i64;
    let ext = reference as i64 + diff;
    ext.max(0) as u64
}

#[derive(Debug, Clone)]
struct RtxEntry {
    packet: RtpPacket,
    first_send_time: SimTime,
    last_rtx_time: Option<SimTime>,
    retransmit_count: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NackStats {
    pub requests: u64,
    pub retransmitted: u64,
    pub skipped_missing: u64,
    pub skipped_rtt: u64,
    pub skipped_max_count: u64,
    pub skipped_budget: u64,
}

/// Copies of sent media packets, keyed by extended stream sequence number.
#[derive(Debug, Clone)]
pub struct RetransmissionBuffer {
    entries: BTreeMap<u64, RtxEntry>,
    unwrapper: SeqUnwrapper,
    max_age: SimTime,
    max_count: u32,
    bandwidth_fraction: f64,
    rtt_gate: f64,
    sent_log: VecDeque<(SimTime, usize)>,
    window_bytes: usize,
    stats: NackStats,
}

impl RetransmissionBuffer {
    pub fn new(max_age: SimTime, max_count: u32, bandwidth_fraction: f64) -> Self {
        Self {
            entries: BTreeMap::new(),
            unwrapper: SeqUnwrapper::default(),
            max_age,
            max_count,
            bandwidth_fraction,
            rtt_gate: 1.0,
            sent_log: VecDeque::new(),
            window_bytes: 0,
            stats: NackStats::default(),
        }
    }

    pub fn from_config(cfg: &ReliabilityConfig) -> Self {
        let mut b = Self::new(cfg.rtx_age, cfg.rtx_max_count, cfg.rtx_bandwidth_fraction);
        b.rtt_gate = cfg.rtx_rtt_gate;
        b
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> NackStats {
        self.stats
    }

    pub fn contains(&self, seq: u16) -> bool {
        self.entries.contains_key(&self.unwrapper.peek(seq))
    }

    pub fn retransmit_count(&self, seq: u16) -> Option<u32> {
        self.entries
            .get(&self.unwrapper.peek(seq))
            .map(|e| e.retransmit_count)
    }

    /// Bytes retransmitted during the trailing second.
    pub fn window_bytes(&self) -> usize {
        self.window_bytes
    }

    pub fn store(&mut self, packet: &RtpPacket, now: SimTime) {
        debug_assert!(packet.is_media());
        let ext = self.unwrapper.unwrap(packet.stream_seq);
        self.entries.insert(
            ext,
            RtxEntry {
                packet: packet.clone(),
                first_send_time: now,
                last_rtx_time: None,
                retransmit_count: 0,
            },
        );
        self.evict(now);
    }

    fn evict(&mut self, now: SimTime) {
        if let Some(newest) = self.unwrapper.newest() {
            if newest >= RTX_SEQ_SPAN {
                let keep_from = newest - RTX_SEQ_SPAN + 1;
                self.entries = self.entries.split_off(&keep_from);
            }
        }
        while let Some((&k, e)) = self.entries.first_key_value() {
            if now.saturating_sub(e.first_send_time) > self.max_age {
                self.entries.remove(&k);
            } else {
                break;
            }
        }
    }

    fn prune_log(&mut self, now: SimTime) {
        while let Some(&(t, bytes)) = self.sent_log.front() {
            if now.saturating_sub(t) >= SimTime::from_secs(1) {
                self.sent_log.pop_front();
                self.window_bytes -= bytes;
            } else {
                break;
            }
        }
    }

    /// Answers a NACK. Requests are skipped when the packet is gone, was
    /// retransmitted less than one RTT ago, hit the retransmission cap, or
    /// would push the trailing-second retransmission volume past the
    /// configured fraction of `bwe_bps`.
    pub fn handle_nack(
        &mut self,
        request: &[u16],
        now: SimTime,
        rtt_estimate: SimTime,
        bwe_bps: f64,
    ) -> Vec<RtpPacket> {
        self.evict(now);
        self.prune_log(now);
        let budget = self.bandwidth_fraction * bwe_bps / 8.0;
        let mut out = Vec::new();
        for &seq in request {
            self.stats.requests += 1;
            let ext = self.unwrapper.peek(seq);
            let Some(entry) = self.entries.get_mut(&ext) else {
                self.stats.skipped_missing += 1;
                continue;
            };
            if let Some(last) = entry.last_rtx_time {
                if now.saturating_sub(last) < rtt_estimate.mul_f64(self.rtt_gate) {
                    self.stats.skipped_rtt += 1;
                    continue;
                }
            }
            if entry.retransmit_count >= self.max_count {
                self.stats.skipped_max_count += 1;
                continue;
            }
            let bytes = entry.packet.wire_size();
            if (self.window_bytes + bytes) as f64 > budget {
                self.stats.skipped_budget += 1;
                continue;
            }
            entry.retransmit_count += 1;
            entry.last_rtx_time = Some(now);
            let mut copy = entry.packet.clone();
            copy.is_retransmission = true;
            copy.rtx_attempt = entry.retransmit_count as u16;
            copy.transport_seq = 0;
            copy.enqueue_time = now;
            self.sent_log.push_back((now, bytes));
            self.window_bytes += bytes;
            self.stats.retransmitted += 1;
            out.push(copy);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FecConfig {
    pub enabled: bool,
    pub group_size_delta: usize,
    pub group_size_key: usize,
}

impl Default for FecConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            group_size_delta: 10,
            group_size_key: 4,
        }
    }
}

impl FecConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.group_size_delta == 0 || self.group_size_key == 0 {
            return Err(ConfigError::new("reliability.fec_group_delta", "group sizes must be >= 1"));
        }
        if self.group_size_key > self.group_size_delta {
            return Err(ConfigError::new(
                "reliability.fec_group_key",
                "keyframe group must not exceed the delta group",
            ));
        }
        Ok(())
    }
}

/// Recovery fields of a parity packet; the payload itself is the XOR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FecHeader {
    pub covered_seqs: Vec<u16>,
    /// XOR of the covered payload lengths.
    pub length_recovery: u16,
    /// XOR of the covered marker bits.
    pub marker_recovery: bool,
}

/// XOR of all inputs, each zero-padded to the longest.
pub fn xor_payloads<'a>(payloads: impl IntoIterator<Item = &'a [u8]>) -> Vec<u8> {
    let mut acc: Vec<u8> = Vec::new();
    for p in payloads {
        if p.len() > acc.len() {
            acc.resize(p.len(), 0);
        }
        for (a, b) in acc.iter_mut().zip(p) {
            *a ^= b;
        }
    }
    acc
}

/// Builds the parity packet for one closed group (all from the same frame).
pub fn maybe_emit_fec(
    group: &[RtpPacket],
    config: &FecConfig,
    group_id: u64,
    fec_seq: u16,
) -> Option<RtpPacket> {
    if !config.enabled || group.is_empty() {
        return None;
    }
    let first = &group[0];
    let payload = xor_payloads(group.iter().map(|p| p.payload.as_ref()));
    let header = FecHeader {
        covered_seqs: group.iter().map(|p| p.stream_seq).collect(),
        length_recovery: group.iter().fold(0u16, |a, p| a ^ p.payload_size as u16),
        marker_recovery: group.iter().fold(false, |a, p| a ^ p.marker),
    };
    Some(RtpPacket {
        stream_seq: fec_seq,
        transport_seq: 0,
        rtp_timestamp: first.rtp_timestamp,
        frame_id: first.frame_id,
        payload_size: payload.len(),
        header_size: first.header_size,
        marker: false,
        is_retransmission: false,
        is_fec: true,
        fec_group_id: Some(group_id),
        protects_keyframe: first.is_keyframe,
        is_keyframe: first.is_keyframe,
        frame_first_seq: first.frame_first_seq,
        frame_packet_count: first.frame_packet_count,
        capture_time: first.capture_time,
        encode_done_time: first.encode_done_time,
        enqueue_time: group.iter().map(|p| p.enqueue_time).max().unwrap_or_default(),
        send_time: SimTime::ZERO,
        tx_start_time: SimTime::ZERO,
        rtx_attempt: 0,
        payload: Bytes::from(payload),
        fec: Some(Box::new(header)),
    })
}

/// Reconstructs the single missing packet of a group from the parity and the survivors.
/// Returns `None` unless exactly one covered packet is absent from `present`.
pub fn recover_single(parity: &RtpPacket, present: &[&RtpPacket]) -> Option<RtpPacket> {
    let header = parity.fec.as_ref()?;
    let mut missing = header
        .covered_seqs
        .iter()
        .filter(|s| !present.iter().any(|p| p.stream_seq == **s));
    let lost_seq = *missing.next()?;
    if missing.next().is_some() {
        return None;
    }
    let survivors: Vec<&&RtpPacket> = present
        .iter()
        .filter(|p| header.covered_seqs.contains(&p.stream_seq))
        .collect();
    let len = survivors
        .iter()
        .fold(header.length_recovery, |a, p| a ^ p.payload_size as u16) as usize;
    let marker = survivors
        .iter()
        .fold(header.marker_recovery, |a, p| a ^ p.marker);
    let mut bytes = xor_payloads(
        std::iter::once(parity.payload.as_ref()).chain(survivors.iter().map(|p| p.payload.as_ref())),
    );
    if len > bytes.len() {
        return None;
    }
    bytes.truncate(len);
    Some(RtpPacket {
        stream_seq: lost_seq,
        transport_seq: parity.transport_seq,
        payload_size: len,
        marker,
        is_fec: false,
        is_retransmission: false,
        fec_group_id: parity.fec_group_id,
        payload: Bytes::from(bytes),
        fec: None,
        ..parity.clone()
    })
}

/// Groups outgoing media packets and emits parity at group or frame boundaries.
/// Groups never span frames, so keyframe and delta protection levels do not mix.
#[derive(Debug, Clone)]
pub struct FecEncoder {
    config: FecConfig,
    pending: Vec<RtpPacket>,
    next_group: u64,
    next_seq: u16,
    emitted: u64,
}

impl FecEncoder {
    pub fn new(config: FecConfig, initial_seq: u16) -> Self {
        Self {
            config,
            pending: Vec::new(),
            next_group: 0,
            next_seq: initial_seq,
            emitted: 0,
        }
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn next_group_id(&self) -> u64 {
        self.next_group
    }

    /// Adds a media packet; returns parity if this packet closed a group.
    pub fn push(&mut self, packet: &RtpPacket) -> Option<RtpPacket> {
        if !self.config.enabled {
            return None;
        }
        if let Some(head) = self.pending.first() {
            if head.frame_id != packet.frame_id {
                // frame changed without a marker (lost tail); never mix frames
                let fec = self.flush();
                self.pending.push(packet.clone());
                debug_assert!(fec.is_some());
                return fec;
            }
        }
        self.pending.push(packet.clone());
        let limit = if packet.is_keyframe {
            self.config.group_size_key
        } else {
            self.config.group_size_delta
        };
        if self.pending.len() >= limit || packet.marker {
            self.flush()
        } else {
            None
        }
    }

    pub fn flush(&mut self) -> Option<RtpPacket> {
        if self.pending.is_empty() {
            return None;
        }
        let group = std::mem::take(&mut self.pending);
        let fec = maybe_emit_fec(&group, &self.config, self.next_group, self.next_seq)?;
        self.next_group += 1;
        self.next_seq = self.next_seq.wrapping_add(1);
        self.emitted += 1;
        Some(fec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::MediaFrame;
    use crate::packetizer::{Packetizer, RtpConfig};

    fn packets(n: usize, key: bool) -> Vec<RtpPacket> {
        let mut p = Packetizer::new(RtpConfig::default(), 0, 100).unwrap();
        p.packetize(&MediaFrame {
            frame_id: 3,
            capture_time: SimTime(0),
            encode_done_time: SimTime(1000),
            size: 1230 * n - 77,
            is_keyframe: key,
        })
        .unwrap()
    }

    #[test]
    fn unwrap_near_handles_wrap() {
        assert_eq!(unwrap_near(2, 65_535 + 65_536), 65_538 + 65_536);
        assert_eq!(unwrap_near(65_535, 65_538), 65_535);
        let mut u = SeqUnwrapper::default();
        let a = u.unwrap(65_534);
        let b = u.unwrap(1);
        assert_eq!(b - a, 3);
    }

    #[test]
    fn nack_round_trip() {
        let mut buf = RetransmissionBuffer::new(SimTime::from_secs(1), 10, 0.25);
        let pkts = packets(3, false);
        for p in &pkts {
            buf.store(p, SimTime(0));
        }
        let out = buf.handle_nack(&[101], SimTime(10_000), SimTime(30_000), 10e6);
        assert_eq!(out.len(), 1);
        assert!(out[0].is_retransmission);
        assert_eq!(out[0].stream_seq, 101);
        assert_eq!(out[0].payload, pkts[1].payload);
    }

    #[test]
    fn second_nack_within_rtt_is_ignored() {
        let mut buf = RetransmissionBuffer::new(SimTime::from_secs(1), 10, 0.25);
        for p in &packets(3, false) {
            buf.store(p, SimTime(0));
        }
        let rtt = SimTime::from_millis(30);
        assert_eq!(buf.handle_nack(&[100], SimTime(1000), rtt, 10e6).len(), 1);
        assert!(buf.handle_nack(&[100], SimTime(20_000), rtt, 10e6).is_empty());
        assert_eq!(buf.handle_nack(&[100], SimTime(31_000), rtt, 10e6).len(), 1);
        assert_eq!(buf.stats().skipped_rtt, 1);
    }

    #[test]
    fn retransmission_cap() {
        let mut buf = RetransmissionBuffer::new(SimTime::from_secs(10), 10, 1.0);
        for p in &packets(1, false) {
            buf.store(p, SimTime(0));
        }
        let mut sent = 0;
        for i in 0..30u64 {
            sent += buf
                .handle_nack(&[100], SimTime(i * 10_000), SimTime(1), 1e9)
                .len();
        }
        assert_eq!(sent, 10);
        assert_eq!(buf.retransmit_count(100), Some(10));
    }

    #[test]
    fn seq_span_eviction() {
        let mut buf = RetransmissionBuffer::new(SimTime::from_secs(1000), 10, 0.25);
        let mut p = packets(1, false).remove(0);
        for i in 0..10_001u32 {
            p.stream_seq = i as u16;
            buf.store(&p, SimTime(0));
        }
        assert_eq!(buf.len(), 10_000);
        assert!(!buf.contains(0));
        assert!(buf.contains(1));
    }

    #[test]
    fn age_eviction() {
        let mut buf = RetransmissionBuffer::new(SimTime::from_secs(1), 10, 0.25);
        let p = packets(1, false).remove(0);
        buf.store(&p, SimTime(0));
        let out = buf.handle_nack(&[p.stream_seq], SimTime::from_secs(2), SimTime(1), 10e6);
        assert!(out.is_empty());
        assert_eq!(buf.stats().skipped_missing, 1);
    }

    #[test]
    fn bandwidth_budget() {
        // 25% of 400 kbps is 12 500 bytes/s: ten 1250-byte packets fit, the eleventh does not
        let mut buf = RetransmissionBuffer::new(SimTime::from_secs(5), 10, 0.25);
        let pk = packets(20, false);
        for p in &pk {
            buf.store(p, SimTime(0));
        }
        let seqs: Vec<u16> = pk.iter().map(|p| p.stream_seq).collect();
        let out = buf.handle_nack(&seqs, SimTime(1000), SimTime(1), 400_000.0);
        assert_eq!(out.len(), 10);
        assert_eq!(buf.stats().skipped_budget, 10);
        let later = buf.handle_nack(&seqs[10..], SimTime(1_001_000), SimTime(1), 400_000.0);
        assert_eq!(later.len(), 10);
    }

    #[test]
    fn fec_delta_group_of_ten() {
        let cfg = FecConfig {
            enabled: true,
            ..Default::default()
        };
        let mut enc = FecEncoder::new(cfg, 0);
        let fec: Vec<_> = packets(10, false).iter().filter_map(|p| enc.push(p)).collect();
        assert_eq!(fec.len(), 1);
        assert_eq!(fec[0].fec.as_ref().unwrap().covered_seqs.len(), 10);
    }

    #[test]
    fn fec_keyframe_groups_of_four() {
        let cfg = FecConfig {
            enabled: true,
            ..Default::default()
        };
        let mut enc = FecEncoder::new(cfg, 0);
        let fec: Vec<_> = packets(8, true).iter().filter_map(|p| enc.push(p)).collect();
        assert_eq!(fec.len(), 2);
        assert!(fec.iter().all(|f| f.fec.as_ref().unwrap().covered_seqs.len() == 4));
        assert!(fec.iter().all(|f| f.protects_keyframe));
    }

    #[test]
    fn fec_disabled_emits_nothing() {
        let mut enc = FecEncoder::new(FecConfig::default(), 0);
        assert!(packets(10, false).iter().all(|p| enc.push(p).is_none()));
        assert!(enc.flush().is_none());
    }

    #[test]
    fn partial_group_flushed_at_frame_end() {
        let cfg = FecConfig {
            enabled: true,
            ..Default::default()
        };
        let mut enc = FecEncoder::new(cfg, 0);
        let fec: Vec<_> = packets(13, false).iter().filter_map(|p| enc.push(p)).collect();
        assert_eq!(
            fec.iter()
                .map(|f| f.fec.as_ref().unwrap().covered_seqs.len())
                .collect::<Vec<_>>(),
            vec![10, 3]
        );
    }

    #[test]
    fn single_loss_recovered_exactly() {
        let cfg = FecConfig {
            enabled: true,
            ..Default::default()
        };
        let group = packets(4, false);
        let parity = maybe_emit_fec(&group, &cfg, 0, 0).unwrap();
        let present: Vec<&RtpPacket> = [0, 1, 2].iter().map(|&i| &group[i]).collect();
        let rec = recover_single(&parity, &present).unwrap();
        assert_eq!(rec.payload, group[3].payload);
        assert_eq!(rec.stream_seq, group[3].stream_seq);
        assert_eq!(rec.payload_size, group[3].payload_size);
        assert!(rec.marker);
        let two_missing: Vec<&RtpPacket> = vec![&group[0], &group[1]];
        assert!(recover_single(&parity, &two_missing).is_none());
    }
}
