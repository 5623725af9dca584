//! RTCP-style reports and transport-wide congestion feedback.
//!
//! TWCC arrival times are coded as 250 µs deltas against the *reconstructed*
//! previous arrival, so quantization error never accumulates along the chain.
//! Each feedback starts where the last acknowledged one ended: if a feedback
//! is lost on the reverse path the next one covers the union of both ranges.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::ConfigError;
use crate::sim::SimTime;

pub const TWCC_DELTA_US: u64 = 250;
/// Smallest RTT ever reported; guards against a zero from coarse timestamps.
pub const RTT_FLOOR: SimTime = SimTime(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FeedbackConfig {
    pub rr_period: SimTime,
    pub twcc_period: SimTime,
    pub no_cost: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            rr_period: SimTime::from_secs(1),
            twcc_period: SimTime::from_millis(100),
            no_cost: false,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rr_period == SimTime::ZERO {
            return Err(ConfigError::new("feedback.rr_period_ms", "must be > 0"));
        }
        if self.twcc_period == SimTime::ZERO {
            return Err(ConfigError::new("feedback.twcc_period_ms", "must be > 0"));
        }
        Ok(())
    }
}

/// When a feedback packet sent at `send_time` reaches the sender.
/// `reverse_transit` is the reverse-link outcome; `None` means it was lost.
pub fn deliver_feedback(
    send_time: SimTime,
    no_cost: bool,
    reverse_transit: impl FnOnce() -> Option<SimTime>,
) -> Option<SimTime> {
    if no_cost {
        Some(send_time)
    } else {
        reverse_transit()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwccFeedback {
    pub feedback_seq: u64,
    pub base_seq: u64,
    /// Exact arrival time of the first received packet in the range.
    pub reference_time: SimTime,
    /// One entry per transport seq from `base_seq`: delta in 250 µs units or missing.
    pub statuses: Vec<Option<i64>>,
    pub send_time: SimTime,
}

impl TwccFeedback {
    pub fn end_seq(&self) -> u64 {
        self.base_seq + self.statuses.len() as u64
    }

    /// Reconstructed `(transport_seq, arrival)` pairs.
    pub fn arrivals(&self) -> Vec<(u64, Option<SimTime>)> {
        let mut prev = self.reference_time.0 as i64;
        self.statuses
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seq = self.base_seq + i as u64;
                match s {
                    Some(units) => {
                        prev += units * TWCC_DELTA_US as i64;
                        (seq, Some(SimTime(prev.max(0) as u64)))
                    }
                    None => (seq, None),
                }
            })
            .collect()
    }

    /// Approximate size on the wire.
    pub fn wire_size(&self) -> usize {
        let received = self.statuses.iter().filter(|s| s.is_some()).count();
        20 + self.statuses.len().div_ceil(7) * 2 + received
    }
}

/// Receiver half of TWCC: records arrivals and builds feedback.
#[derive(Debug, Clone, Default)]
pub struct TwccRecorder {
    arrivals: BTreeMap<u64, SimTime>,
    acked_until: u64,
    next_feedback_seq: u64,
    // feedback_seq -> end of its range, for feedback not yet acknowledged
    outstanding: BTreeMap<u64, u64>,
}

impl TwccRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_packet(&mut self, transport_seq: u64, arrival: SimTime) {
        if transport_seq >= self.acked_until {
            self.arrivals.entry(transport_seq).or_insert(arrival);
        }
    }

    /// The sender has processed every feedback up to `feedback_seq`.
    pub fn on_ack(&mut self, feedback_seq: u64) {
        let mut end = None;
        while let Some((&f, &e)) = self.outstanding.first_key_value() {
            if f > feedback_seq {
                break;
            }
            end = Some(e);
            self.outstanding.remove(&f);
        }
        if let Some(e) = end {
            self.acked_until = self.acked_until.max(e);
            self.arrivals = self.arrivals.split_off(&self.acked_until);
        }
    }

    /// Range start for the next feedback.
    pub fn range_start(&self) -> u64 {
        self.acked_until
    }

    /// Builds feedback covering `[acked_until, highest received]`, or `None`
    /// when nothing arrived in that range.
    pub fn build(&mut self, now: SimTime) -> Option<TwccFeedback> {
        let (&last, _) = self.arrivals.last_key_value()?;
        let base = self.acked_until;
        let reference = *self.arrivals.values().next()?;
        let mut prev = reference.0 as i64;
        let mut statuses = Vec::with_capacity((last - base + 1) as usize);
        for seq in base..=last {
            match self.arrivals.get(&seq) {
                Some(t) => {
                    let q = TWCC_DELTA_US as i64;
                    let diff = t.0 as i64 - prev;
                    let units = (diff + diff.signum() * q / 2) / q;
                    prev += units * q;
                    statuses.push(Some(units));
                }
                None => statuses.push(None),
            }
        }
        let fb = TwccFeedback {
            feedback_seq: self.next_feedback_seq,
            base_seq: base,
            reference_time: reference,
            statuses,
            send_time: now,
        };
        self.outstanding.insert(fb.feedback_seq, fb.end_seq());
        self.next_feedback_seq += 1;
        Some(fb)
    }
}

/// One packet's fate as seen by the sender after matching feedback to its send log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketResult {
    pub transport_seq: u64,
    pub send_time: SimTime,
    pub size: usize,
    pub arrival: Option<SimTime>,
}

/// Sender half of TWCC: dedups overlapping feedback so each transport seq
/// is consumed exactly once.
#[derive(Debug, Clone, Default)]
pub struct TwccConsumer {
    consumed_until: u64,
    highest_feedback: Option<u64>,
    lost_feedback: u64,
}

impl TwccConsumer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn highest_feedback_seq(&self) -> Option<u64> {
        self.highest_feedback
    }

    /// Feedback packets inferred lost from gaps in `feedback_seq`.
    pub fn lost_feedback(&self) -> u64 {
        self.lost_feedback
    }

    /// Returns the newly covered `(seq, arrival)` statuses. Stale feedback yields nothing.
    pub fn consume(&mut self, fb: &TwccFeedback) -> Vec<(u64, Option<SimTime>)> {
        match self.highest_feedback {
            Some(h) if fb.feedback_seq <= h => return Vec::new(),
            Some(h) => self.lost_feedback += fb.feedback_seq - h - 1,
            None => self.lost_feedback += fb.feedback_seq,
        }
        self.highest_feedback = Some(fb.feedback_seq);
        let out: Vec<_> = fb
            .arrivals()
            .into_iter()
            .filter(|(s, _)| *s >= self.consumed_until)
            .collect();
        self.consumed_until = self.consumed_until.max(fb.end_seq());
        out
    }

    pub fn consumed_until(&self) -> u64 {
        self.consumed_until
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SenderReport {
    pub send_time: SimTime,
    pub packets_sent: u64,
    pub octets_sent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReceiverReport {
    /// Fixed point, fraction × 256.
    pub fraction_lost: u8,
    pub cumulative_lost: u64,
    pub highest_seq: u64,
    /// RFC 3550 interarrival jitter, microseconds.
    pub jitter_us: f64,
    /// Send time of the last SR received, if any.
    pub lsr: Option<SimTime>,
    /// Time between receiving that SR and sending this report.
    pub dlsr: SimTime,
}

impl ReceiverReport {
    pub fn fraction_lost_f64(&self) -> f64 {
        self.fraction_lost as f64 / 256.0
    }
}

/// `now − lsr − dlsr`, clamped to [`RTT_FLOOR`]; `None` without a prior SR.
pub fn compute_rtt(rr: &ReceiverReport, now: SimTime) -> Option<SimTime> {
    let lsr = rr.lsr?;
    let rtt = now.0 as i64 - lsr.0 as i64 - rr.dlsr.0 as i64;
    Some(SimTime(rtt.max(RTT_FLOOR.0 as i64) as u64))
}

/// Receiver-side reception statistics for RR generation.
#[derive(Debug, Clone, Default)]
pub struct ReceptionStats {
    base_seq: Option<u64>,
    max_seq: u64,
    received: u64,
    expected_prior: u64,
    received_prior: u64,
    cumulative_lost: u64,
    jitter_us: f64,
    last_transit: Option<i64>,
    last_sr: Option<(SimTime, SimTime)>,
}

impl ReceptionStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// A first transmission of a media packet with extended seq `ext`,
    /// sent-clock timestamp `media_time` (capture time), arriving at `arrival`.
    pub fn on_packet(&mut self, ext: u64, media_time: SimTime, arrival: SimTime) {
        match self.base_seq {
            None => {
                self.base_seq = Some(ext);
                self.max_seq = ext;
            }
            Some(_) => self.max_seq = self.max_seq.max(ext),
        }
        self.received += 1;
        let transit = arrival.0 as i64 - media_time.0 as i64;
        if let Some(prev) = self.last_transit {
            let d = (transit - prev).abs() as f64;
            self.jitter_us += (d - self.jitter_us) / 16.0;
        }
        self.last_transit = Some(transit);
    }

    pub fn on_sender_report(&mut self, sr: &SenderReport, arrival: SimTime) {
        self.last_sr = Some((sr.send_time, arrival));
    }

    pub fn expected(&self) -> u64 {
        match self.base_seq {
            Some(b) => self.max_seq - b + 1,
            None => 0,
        }
    }

    pub fn jitter_us(&self) -> f64 {
        self.jitter_us
    }

    /// Builds a report and starts a new interval.
    pub fn build_report(&mut self, now: SimTime) -> ReceiverReport {
        let expected = self.expected();
        let exp_int = expected - self.expected_prior;
        let rec_int = self.received - self.received_prior;
        self.expected_prior = expected;
        self.received_prior = self.received;
        let lost_int = exp_int.saturating_sub(rec_int);
        let fraction_lost = if exp_int == 0 {
            0
        } else {
            ((lost_int << 8) / exp_int).min(255) as u8
        };
        self.cumulative_lost = self
            .cumulative_lost
            .max(expected.saturating_sub(self.received));
        let (lsr, dlsr) = match self.last_sr {
            Some((sent, arrived)) => (Some(sent), now - arrived),
            None => (None, SimTime::ZERO),
        };
        ReceiverReport {
            fraction_lost,
            cumulative_lost: self.cumulative_lost,
            highest_seq: self.max_seq,
            jitter_us: self.jitter_us,
            lsr,
            dlsr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twcc_quantization_example() {
        let mut r = TwccRecorder::new();
        r.on_packet(0, SimTime(0));
        r.on_packet(1, SimTime(1000));
        r.on_packet(2, SimTime(2500));
        let fb = r.build(SimTime(3000)).unwrap();
        assert_eq!(fb.statuses, vec![Some(0), Some(4), Some(6)]);
    }

    #[test]
    fn twcc_gap_is_missing() {
        let mut r = TwccRecorder::new();
        r.on_ack(0); // nothing outstanding: no-op
        for (s, t) in [(0, 10), (1, 20), (2, 30), (3, 40), (4, 50), (6, 70)] {
            r.on_packet(s, SimTime(t * 1000));
        }
        let fb = r.build(SimTime(100_000)).unwrap();
        let arr = fb.arrivals();
        assert_eq!(arr[5], (5, None));
        assert!(arr[4].1.is_some() && arr[6].1.is_some());
    }

    #[test]
    fn twcc_empty_window() {
        let mut r = TwccRecorder::new();
        assert!(r.build(SimTime(0)).is_none());
        r.on_packet(0, SimTime(5));
        let fb = r.build(SimTime(10)).unwrap();
        r.on_ack(fb.feedback_seq);
        assert!(r.build(SimTime(20)).is_none());
    }

    #[test]
    fn lost_feedback_is_covered_by_the_next() {
        let mut r = TwccRecorder::new();
        let mut c = TwccConsumer::new();
        for s in 0..10 {
            r.on_packet(s, SimTime(s * 1000));
        }
        let lost = r.build(SimTime(10_000)).unwrap();
        assert_eq!((lost.base_seq, lost.end_seq()), (0, 10));
        for s in 10..20 {
            r.on_packet(s, SimTime(s * 1000));
        }
        let next = r.build(SimTime(20_000)).unwrap();
        assert_eq!((next.base_seq, next.end_seq()), (0, 20));
        let got = c.consume(&next);
        assert_eq!(got.len(), 20);
        assert_eq!(c.lost_feedback(), 1);
        r.on_ack(next.feedback_seq);
        for s in 20..25 {
            r.on_packet(s, SimTime(s * 1000));
        }
        let third = r.build(SimTime(30_000)).unwrap();
        assert_eq!(third.base_seq, 20);
        // a stale duplicate yields nothing
        assert!(c.consume(&next).is_empty());
    }

    #[test]
    fn overlapping_feedback_consumed_once() {
        let mut r = TwccRecorder::new();
        let mut c = TwccConsumer::new();
        for s in 0..5 {
            r.on_packet(s, SimTime(s * 1000));
        }
        let a = r.build(SimTime(1)).unwrap();
        for s in 5..8 {
            r.on_packet(s, SimTime(s * 1000));
        }
        // ack of `a` not yet seen by the receiver: `b` overlaps
        let b = r.build(SimTime(2)).unwrap();
        assert_eq!(c.consume(&a).len(), 5);
        let got: Vec<u64> = c.consume(&b).into_iter().map(|x| x.0).collect();
        assert_eq!(got, vec![5, 6, 7]);
    }

    #[test]
    fn reconstruction_error_bounded() {
        let mut r = TwccRecorder::new();
        let mut truth = Vec::new();
        let mut t = 0u64;
        for s in 0..1000u64 {
            t += 37 + (s * 7919) % 1500;
            truth.push(t);
            r.on_packet(s, SimTime(t));
        }
        let fb = r.build(SimTime(t)).unwrap();
        for ((_, got), want) in fb.arrivals().into_iter().zip(truth) {
            assert!(got.unwrap().0.abs_diff(want) <= TWCC_DELTA_US / 2);
        }
    }

    #[test]
    fn no_cost_delivery_is_instant() {
        assert_eq!(deliver_feedback(SimTime(7), true, || None), Some(SimTime(7)));
        assert_eq!(
            deliver_feedback(SimTime(7), false, || Some(SimTime(15_007))),
            Some(SimTime(15_007))
        );
        assert_eq!(deliver_feedback(SimTime(7), false, || None), None);
    }

    #[test]
    fn rtt_symmetric_link() {
        let rr = ReceiverReport {
            fraction_lost: 0,
            cumulative_lost: 0,
            highest_seq: 0,
            jitter_us: 0.0,
            lsr: Some(SimTime::from_millis(100)),
            dlsr: SimTime::ZERO,
        };
        assert_eq!(compute_rtt(&rr, SimTime::from_millis(130)), Some(SimTime::from_millis(30)));
        let degenerate = ReceiverReport {
            dlsr: SimTime::from_millis(30),
            ..rr
        };
        assert_eq!(compute_rtt(&degenerate, SimTime::from_millis(130)), Some(RTT_FLOOR));
        let none = ReceiverReport { lsr: None, ..rr };
        assert_eq!(compute_rtt(&none, SimTime::from_millis(130)), None);
    }

    #[test]
    fn fraction_lost_matches_seq_arithmetic() {
        let mut st = ReceptionStats::new();
        // 100 expected, 7 missing
        for ext in 1000u64..1100 {
            if ext % 15 != 3 {
                st.on_packet(ext, SimTime(ext), SimTime(ext + 10));
            }
        }
        let rr = st.build_report(SimTime(0));
        let lost = (1000u64..1100).filter(|e| e % 15 == 3).count() as u64;
        assert_eq!(rr.fraction_lost as u64, (lost << 8) / 100);
        assert_eq!(rr.cumulative_lost, lost);
        assert_eq!(rr.jitter_us, 0.0);
        let again = st.build_report(SimTime(1));
        assert_eq!(again.fraction_lost, 0);
        assert_eq!(again.cumulative_lost, lost);
    }

    #[test]
    fn jitter_rfc_estimator() {
        let mut st = ReceptionStats::new();
        st.on_packet(0, SimTime(0), SimTime(1000));
        st.on_packet(1, SimTime(50_000), SimTime(51_800));
        // |D| = 800, J = 800/16
        assert!((st.jitter_us() - 50.0).abs() < 1e-9);
    }
}
