//! RTP packetization and the send-side pacer.

use std::collections::VecDeque;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::media::MediaFrame;
use crate::reliability::FecHeader;
use crate::sim::SimTime;

pub const DEFAULT_MTU: usize = 1250;
/// 12-byte RTP header plus an 8-byte extension block carrying the transport-wide sequence number.
pub const DEFAULT_HEADER_SIZE: usize = 20;
pub const DEFAULT_CLOCK_HZ: u32 = 90_000;
pub const DEFAULT_PACING_MULTIPLIER: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtpConfig {
    pub mtu: usize,
    pub header_size: usize,
    pub pacing_multiplier: f64,
    pub timestamp_clock_hz: u32,
}

impl Default for RtpConfig {
    fn default() -> Self {
        Self {
            mtu: DEFAULT_MTU,
            header_size: DEFAULT_HEADER_SIZE,
            pacing_multiplier: DEFAULT_PACING_MULTIPLIER,
            timestamp_clock_hz: DEFAULT_CLOCK_HZ,
        }
    }
}

impl RtpConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mtu <= self.header_size {
            return Err(ConfigError::new(
                "rtp.mtu",
                format!("mtu {} must exceed header size {}", self.mtu, self.header_size),
            ));
        }
        if self.mtu - self.header_size > u16::MAX as usize {
            return Err(ConfigError::new("rtp.mtu", "payload budget exceeds 65535 bytes"));
        }
        if !(self.pacing_multiplier > 0.0) {
            return Err(ConfigError::new("rtp.pacing_multiplier", "must be > 0"));
        }
        if self.timestamp_clock_hz == 0 {
            return Err(ConfigError::new("rtp.timestamp_clock_hz", "must be > 0"));
        }
        Ok(())
    }
}

/// One RTP packet as it travels through the simulation.
///
/// Besides the header fields the packet carries simulation metadata
/// (capture time, frame layout, per-hop timestamps) used for latency
/// accounting. `frame_first_seq`/`frame_packet_count` stand in for the frame
/// boundary inference a real receiver does from marker bits and timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RtpPacket {
    pub stream_seq: u16,
    pub transport_seq: u64,
    pub rtp_timestamp: u32,
    pub frame_id: u64,
    pub payload_size: usize,
    pub header_size: usize,
    pub marker: bool,
    pub is_retransmission: bool,
    pub is_fec: bool,
    pub fec_group_id: Option<u64>,
    pub protects_keyframe: bool,
    pub is_keyframe: bool,
    pub frame_first_seq: u16,
    pub frame_packet_count: u16,
    pub capture_time: SimTime,
    pub encode_done_time: SimTime,
    pub enqueue_time: SimTime,
    pub send_time: SimTime,
    /// When the link started serializing this packet.
    pub tx_start_time: SimTime,
    pub rtx_attempt: u16,
    pub payload: Bytes,
    pub fec: Option<Box<FecHeader>>,
}

impl RtpPacket {
    pub fn wire_size(&self) -> usize {
        self.payload_size + self.header_size
    }

    pub fn is_media(&self) -> bool {
        !self.is_fec
    }
}

/// Deterministic stand-in for encoded bytes.
pub fn synthetic_payload(frame_id: u64, seq_index: u64, len: usize) -> Bytes {
    let mut out = Vec::with_capacity(len + 8);
    let mut x = frame_id
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(seq_index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        | 1;
    while out.len() < len {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.truncate(len);
    Bytes::from(out)
}

/// `(session_offset + capture_time * clock / 1e6) mod 2^32`.
pub fn timestamp_of(capture_time: SimTime, session_offset: u32, clock_hz: u32) -> u32 {
    let ticks = (capture_time.as_micros() as u128 * clock_hz as u128) / 1_000_000;
    (session_offset as u128 + ticks) as u32
}

#[derive(Debug, Clone)]
pub struct Packetizer {
    config: RtpConfig,
    session_offset: u32,
    next_seq: u16,
    next_index: u64,
}

impl Packetizer {
    pub fn new(config: RtpConfig, session_offset: u32, initial_seq: u16) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            session_offset,
            next_seq: initial_seq,
            next_index: 0,
        })
    }

    pub fn config(&self) -> &RtpConfig {
        &self.config
    }

    pub fn session_offset(&self) -> u32 {
        self.session_offset
    }

    pub fn max_payload(&self) -> usize {
        self.config.mtu - self.config.header_size
    }

    /// Splits `frame` into MTU-sized packets, all sharing the frame's RTP timestamp.
    pub fn packetize(&mut self, frame: &MediaFrame) -> Result<Vec<RtpPacket>, ConfigError> {
        self.config.validate()?;
        if frame.size == 0 {
            return Err(ConfigError::new("frame.size", "must be > 0"));
        }
        let max_payload = self.max_payload();
        let count = frame.size.div_ceil(max_payload);
        if count > u16::MAX as usize {
            return Err(ConfigError::new("frame.size", "frame needs more than 65535 packets"));
        }
        let ts = timestamp_of(
            frame.capture_time,
            self.session_offset,
            self.config.timestamp_clock_hz,
        );
        let first_seq = self.next_seq;
        let mut packets = Vec::with_capacity(count);
        let mut remaining = frame.size;
        for i in 0..count {
            let payload_size = remaining.min(max_payload);
            remaining -= payload_size;
            packets.push(RtpPacket {
                stream_seq: self.next_seq,
                transport_seq: 0,
                rtp_timestamp: ts,
                frame_id: frame.frame_id,
                payload_size,
                header_size: self.config.header_size,
                marker: i + 1 == count,
                is_retransmission: false,
                is_fec: false,
                fec_group_id: None,
                protects_keyframe: frame.is_keyframe,
                is_keyframe: frame.is_keyframe,
                frame_first_seq: first_seq,
                frame_packet_count: count as u16,
                capture_time: frame.capture_time,
                encode_done_time: frame.encode_done_time,
                enqueue_time: frame.encode_done_time,
                send_time: SimTime::ZERO,
                tx_start_time: SimTime::ZERO,
                rtx_attempt: 0,
                payload: synthetic_payload(frame.frame_id, self.next_index, payload_size),
                fec: None,
            });
            self.next_seq = self.next_seq.wrapping_add(1);
            self.next_index += 1;
        }
        Ok(packets)
    }
}

/// Leaky-bucket pacer. Retransmissions bypass the FIFO and go out first.
#[derive(Debug, Clone)]
pub struct Pacer {
    queue: VecDeque<RtpPacket>,
    priority: VecDeque<RtpPacket>,
    multiplier: f64,
    pacing_rate: u64,
    next_allowed: SimTime,
    last_release: Option<SimTime>,
    // remainder of bits*1e6 / rate carried between releases
    carry: u64,
    queued_bytes: usize,
}

impl Pacer {
    pub fn new(target_bitrate: u64, multiplier: f64) -> Self {
        let mut p = Self {
            queue: VecDeque::new(),
            priority: VecDeque::new(),
            multiplier,
            pacing_rate: 1,
            next_allowed: SimTime::ZERO,
            last_release: None,
            carry: 0,
            queued_bytes: 0,
        };
        p.set_target_bitrate(target_bitrate);
        p
    }

    pub fn pacing_rate(&self) -> u64 {
        self.pacing_rate
    }

    pub fn set_target_bitrate(&mut self, target: u64) {
        let rate = ((target as f64) * self.multiplier).round().max(1.0) as u64;
        if rate != self.pacing_rate {
            self.pacing_rate = rate;
            self.carry = 0;
        }
    }

    pub fn set_pacing_rate(&mut self, rate_bps: u64) {
        self.pacing_rate = rate_bps.max(1);
        self.carry = 0;
    }

    pub fn len(&self) -> usize {
        self.queue.len() + self.priority.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queued_bytes(&self) -> usize {
        self.queued_bytes
    }

    pub fn last_release_time(&self) -> Option<SimTime> {
        self.last_release
    }

    pub fn enqueue(&mut self, packet: RtpPacket) {
        self.queued_bytes += packet.wire_size();
        self.queue.push_back(packet);
    }

    /// Retransmissions jump ahead of fresh media.
    pub fn enqueue_priority(&mut self, packet: RtpPacket) {
        self.queued_bytes += packet.wire_size();
        self.priority.push_back(packet);
    }

    pub fn next_release_time(&self, now: SimTime) -> Option<SimTime> {
        if self.is_empty() {
            None
        } else {
            Some(now.max(self.next_allowed))
        }
    }

    fn spacing(&self, bytes: usize, carry: u64) -> (SimTime, u64) {
        let num = bytes as u128 * 8 * 1_000_000 + carry as u128;
        let rate = self.pacing_rate as u128;
        (SimTime((num / rate) as u64), (num % rate) as u64)
    }

    /// Enqueues and returns the projected send time given the current backlog.
    pub fn pace(&mut self, packet: RtpPacket, now: SimTime) -> SimTime {
        let prio = packet.is_retransmission;
        let ahead: Vec<usize> = if prio {
            self.priority.iter().map(|p| p.wire_size()).collect()
        } else {
            self.priority
                .iter()
                .chain(self.queue.iter())
                .map(|p| p.wire_size())
                .collect()
        };
        let mut t = now.max(self.next_allowed);
        let mut carry = if t > self.next_allowed { 0 } else { self.carry };
        for bytes in ahead {
            let (gap, c) = self.spacing(bytes, carry);
            t += gap;
            carry = c;
        }
        if prio {
            self.enqueue_priority(packet);
        } else {
            self.enqueue(packet);
        }
        t
    }

    /// Releases the head packet; `now` must be at or after [`Pacer::next_release_time`].
    pub fn release(&mut self, now: SimTime) -> Option<RtpPacket> {
        if now < self.next_allowed {
            return None;
        }
        let mut packet = self.priority.pop_front().or_else(|| self.queue.pop_front())?;
        self.queued_bytes -= packet.wire_size();
        if now > self.next_allowed {
            self.carry = 0;
        }
        let (gap, carry) = self.spacing(packet.wire_size(), self.carry);
        self.carry = carry;
        self.next_allowed = now + gap;
        self.last_release = Some(now);
        packet.send_time = now;
        Some(packet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(size: usize, capture: u64) -> MediaFrame {
        MediaFrame {
            frame_id: capture,
            capture_time: SimTime(capture),
            encode_done_time: SimTime(capture + 1000),
            size,
            is_keyframe: false,
        }
    }

    fn pk(size_total: usize) -> RtpPacket {
        let mut p = Packetizer::new(RtpConfig::default(), 0, 0).unwrap();
        let mut v = p.packetize(&frame(size_total - 20, 0)).unwrap();
        v.remove(0)
    }

    #[test]
    fn splits_3690_bytes_into_three_equal_packets() {
        let mut p = Packetizer::new(RtpConfig::default(), 77, 10).unwrap();
        let pkts = p.packetize(&frame(3690, 0)).unwrap();
        assert_eq!(pkts.len(), 3);
        assert!(pkts.iter().all(|p| p.payload_size == 1230));
        assert_eq!(
            pkts.iter().map(|p| p.marker).collect::<Vec<_>>(),
            vec![false, false, true]
        );
        assert!(pkts.iter().all(|p| p.wire_size() <= 1250));
        assert_eq!(pkts.iter().map(|p| p.stream_seq).collect::<Vec<_>>(), vec![10, 11, 12]);
    }

    #[test]
    fn one_byte_frame_is_one_marked_packet() {
        let mut p = Packetizer::new(RtpConfig::default(), 0, 0).unwrap();
        let pkts = p.packetize(&frame(1, 0)).unwrap();
        assert_eq!(pkts.len(), 1);
        assert!(pkts[0].marker);
        assert_eq!(pkts[0].payload.len(), 1);
    }

    #[test]
    fn default_mtu_is_1250() {
        assert_eq!(RtpConfig::default().mtu, 1250);
    }

    #[test]
    fn mtu_not_above_header_is_rejected() {
        let cfg = RtpConfig {
            mtu: 20,
            ..Default::default()
        };
        assert!(Packetizer::new(cfg, 0, 0).is_err());
    }

    #[test]
    fn timestamps() {
        assert_eq!(timestamp_of(SimTime(0), 12345, 90_000), 12345);
        let a = timestamp_of(SimTime(0), 5, 90_000);
        let b = timestamp_of(SimTime(50_000), 5, 90_000);
        assert_eq!(b.wrapping_sub(a), 4500);
        // wraps modulo 2^32
        assert_eq!(timestamp_of(SimTime(1_000_000), u32::MAX, 90_000), 89_999);
        let mut p = Packetizer::new(RtpConfig::default(), 9, 0).unwrap();
        let pkts = p.packetize(&frame(5000, 40_000)).unwrap();
        assert!(pkts.windows(2).all(|w| w[0].rtp_timestamp == w[1].rtp_timestamp));
    }

    #[test]
    fn sequence_numbers_wrap() {
        let mut p = Packetizer::new(RtpConfig::default(), 0, u16::MAX).unwrap();
        let pkts = p.packetize(&frame(2460, 0)).unwrap();
        assert_eq!(pkts[0].stream_seq, u16::MAX);
        assert_eq!(pkts[1].stream_seq, 0);
        assert_eq!(pkts[1].frame_first_seq, u16::MAX);
    }

    #[test]
    fn idle_pacer_sends_now() {
        let mut pacer = Pacer::new(8_000_000, 1.25);
        assert_eq!(pacer.pace(pk(1250), SimTime(777)), SimTime(777));
    }

    #[test]
    fn pacing_spacing_at_10mbps() {
        let mut pacer = Pacer::new(8_000_000, 1.25);
        assert_eq!(pacer.pacing_rate(), 10_000_000);
        pacer.enqueue(pk(1250));
        pacer.enqueue(pk(1250));
        let a = pacer.release(SimTime(0)).unwrap();
        let t = pacer.next_release_time(SimTime(0)).unwrap();
        let b = pacer.release(t).unwrap();
        assert_eq!(b.send_time - a.send_time, SimTime(1000));
    }

    #[test]
    fn retransmission_jumps_queue() {
        let mut pacer = Pacer::new(1_000_000, 1.25);
        for _ in 0..5 {
            pacer.enqueue(pk(1000));
        }
        let mut rtx = pk(1000);
        rtx.is_retransmission = true;
        rtx.stream_seq = 999;
        pacer.enqueue_priority(rtx);
        assert_eq!(pacer.release(SimTime(0)).unwrap().stream_seq, 999);
    }

    #[test]
    fn backlog_span_is_exact() {
        // 1250 bytes at 3 Mbps is 3333.33 µs; carried remainder keeps the total exact
        let mut pacer = Pacer::new(3_000_000, 1.0);
        let n = 100u64;
        for _ in 0..n {
            pacer.enqueue(pk(1250));
        }
        let mut t = SimTime(0);
        let mut first = None;
        let mut last = SimTime(0);
        while let Some(next) = pacer.next_release_time(t) {
            t = next;
            let p = pacer.release(t).unwrap();
            first.get_or_insert(p.send_time);
            last = p.send_time;
        }
        let expect = (n - 1) * 10_000 * 1_000_000 / 3_000_000;
        assert_eq!((last - first.unwrap()).as_micros(), expect);
    }
}
