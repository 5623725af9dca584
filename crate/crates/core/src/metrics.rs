//! Per-second metric rows, run summary and summary comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::rate_control::Region;
use crate::sim::SimTime;

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 16] = [
    "t_s",
    "rx_rate_mbps",
    "rx_total_mbytes",
    "rtt_ms",
    "plr_window_pct",
    "plr_global_pct",
    "rtx_rate_global_pct",
    "goodput_mbps",
    "target_bitrate_mbps",
    "frames_played",
    "frames_skipped",
    "stall_ms",
    "latency_processing_ms",
    "latency_queuing_ms",
    "latency_transmission_ms",
    "latency_decoding_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub t_s: u64,
    pub rx_rate_mbps: f64,
    pub rx_total_mbytes: f64,
    /// Latest RTCP round trip; `None` before the first report.
    pub rtt_ms: Option<f64>,
    pub plr_window_pct: f64,
    pub plr_global_pct: f64,
    pub rtx_rate_global_pct: f64,
    pub goodput_mbps: f64,
    pub target_bitrate_mbps: f64,
    pub frames_played: u64,
    pub frames_skipped: u64,
    pub stall_ms: f64,
    /// Window means over played frames; `None` when nothing played.
    pub latency_processing_ms: Option<f64>,
    pub latency_queuing_ms: Option<f64>,
    pub latency_transmission_ms: Option<f64>,
    pub latency_decoding_ms: Option<f64>,
}

impl MetricsRow {
    fn csv_line(&self, out: &mut String) {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{:.4},{:.4},{:.4},{:.6},{:.6},{},{},{:.3},{},{},{},{}",
            self.t_s,
            self.rx_rate_mbps,
            self.rx_total_mbytes,
            opt(self.rtt_ms),
            self.plr_window_pct,
            self.plr_global_pct,
            self.rtx_rate_global_pct,
            self.goodput_mbps,
            self.target_bitrate_mbps,
            self.frames_played,
            self.frames_skipped,
            self.stall_ms,
            opt(self.latency_processing_ms),
            opt(self.latency_queuing_ms),
            opt(self.latency_transmission_ms),
            opt(self.latency_decoding_ms),
        );
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        r.csv_line(&mut out);
    }
    out
}

#[derive(Debug, Clone, Default)]
struct Bucket {
    rx_bytes: u64,
    goodput_bytes: u64,
    lost: u64,
    expected: u64,
    played: u64,
    skipped: u64,
    stall_us: u64,
    latency_us: [u64; 4],
    // sampled at the end of the window
    rtt: Option<SimTime>,
    target_bps: f64,
    media_sent: u64,
    rtx_sent: u64,
}

/// Accumulates events into 1-second windows `[k, k+1)`.
#[derive(Debug, Clone)]
pub struct MetricsRecorder {
    buckets: Vec<Bucket>,
}

impl MetricsRecorder {
    pub fn new(duration: SimTime) -> Self {
        let n = duration.0.div_ceil(1_000_000).max(1) as usize;
        Self {
            buckets: vec![Bucket::default(); n],
        }
    }

    pub fn windows(&self) -> usize {
        self.buckets.len()
    }

    fn at(&mut self, t: SimTime) -> &mut Bucket {
        let i = ((t.0 / 1_000_000) as usize).min(self.buckets.len() - 1);
        &mut self.buckets[i]
    }

    /// Index of the window whose end sample is taken at `t`.
    fn ending_at(&mut self, t: SimTime) -> &mut Bucket {
        let i = ((t.0.saturating_sub(1)) / 1_000_000) as usize;
        let i = i.min(self.buckets.len() - 1);
        &mut self.buckets[i]
    }

    pub fn on_delivery(&mut self, t: SimTime, wire_bytes: usize) {
        self.at(t).rx_bytes += wire_bytes as u64;
    }

    pub fn on_goodput(&mut self, arrival: SimTime, payload_bytes: usize) {
        self.at(arrival).goodput_bytes += payload_bytes as u64;
    }

    pub fn on_decided(&mut self, t: SimTime, lost: u64, expected: u64) {
        let b = self.at(t);
        b.lost += lost;
        b.expected += expected;
    }

    pub fn on_played(&mut self, t: SimTime, stall: SimTime, parts: [SimTime; 4]) {
        let b = self.at(t);
        b.played += 1;
        b.stall_us += stall.0;
        for (acc, p) in b.latency_us.iter_mut().zip(parts) {
            *acc += p.0;
        }
    }

    pub fn on_skipped(&mut self, t: SimTime) {
        self.at(t).skipped += 1;
    }

    pub fn sample(&mut self, t: SimTime, rtt: Option<SimTime>, target_bps: f64, media_sent: u64, rtx_sent: u64) {
        let b = self.ending_at(t);
        b.rtt = rtt;
        b.target_bps = target_bps;
        b.media_sent = media_sent;
        b.rtx_sent = rtx_sent;
    }

    pub fn rows(&self, duration: SimTime) -> Vec<MetricsRow> {
        let mut rx_total = 0u64;
        let (mut lost, mut expected) = (0u64, 0u64);
        let n = self.buckets.len();
        self.buckets
            .iter()
            .enumerate()
            .map(|(i, b)| {
                // the last window may be shorter than a second
                let start = i as u64 * 1_000_000;
                let end = if i + 1 == n { duration.0.max(start + 1) } else { start + 1_000_000 };
                let secs = (end - start) as f64 / 1e6;
                rx_total += b.rx_bytes;
                lost += b.lost;
                expected += b.expected;
                let pct = |l: u64, e: u64| if e == 0 { 0.0 } else { 100.0 * l as f64 / e as f64 };
                let lat = |k: usize| {
                    (b.played > 0).then(|| b.latency_us[k] as f64 / b.played as f64 / 1000.0)
                };
                MetricsRow {
                    t_s: i as u64 + 1,
                    rx_rate_mbps: b.rx_bytes as f64 * 8.0 / secs / 1e6,
                    rx_total_mbytes: rx_total as f64 / 1e6,
                    rtt_ms: b.rtt.map(|r| r.as_millis_f64()),
                    plr_window_pct: pct(b.lost, b.expected),
                    plr_global_pct: pct(lost, expected),
                    rtx_rate_global_pct: pct(b.rtx_sent, b.media_sent),
                    goodput_mbps: b.goodput_bytes as f64 * 8.0 / secs / 1e6,
                    target_bitrate_mbps: b.target_bps / 1e6,
                    frames_played: b.played,
                    frames_skipped: b.skipped,
                    stall_ms: b.stall_us as f64 / 1000.0,
                    latency_processing_ms: lat(0),
                    latency_queuing_ms: lat(1),
                    latency_transmission_ms: lat(2),
                    latency_decoding_ms: lat(3),
                }
            })
            .collect()
    }
}

/// One applied controller decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub t_us: u64,
    pub target_bps: f64,
    pub region: Option<Region>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub packets_sent: u64,
    pub delivered: u64,
    pub dropped_queue: u64,
    pub dropped_random: u64,
    pub dropped_range: u64,
    pub in_flight_at_end: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.packets_sent
            == self.delivered
                + self.dropped_queue
                + self.dropped_random
                + self.dropped_range
                + self.in_flight_at_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub p95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        // nearest-rank percentile
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(Stat {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p95: v[rank - 1],
        })
    }
}

/// Where a playout loss rate falls relative to the usual tolerance for video calls.
pub fn plr_band(pct: f64) -> &'static str {
    if pct < 1.0 {
        "good"
    } else if pct <= 3.0 {
        "acceptable"
    } else {
        "poor"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub controller: String,
    pub transport: String,
    pub duration_s: f64,
    pub config_digest: String,
    pub csv_schema_version: u32,
    pub start_rate_bps: f64,
    pub keyframe_size_ratio: f64,
    pub rx_total_mbytes: f64,
    pub rx_rate_mbps: Option<Stat>,
    pub goodput_mbps: Option<Stat>,
    pub target_bitrate_mbps: Option<Stat>,
    pub rtt_ms: Option<Stat>,
    pub latency_total_ms: Option<Stat>,
    pub playout_plr_pct: f64,
    pub plr_band: String,
    pub network_plr_pct: f64,
    pub rtx_rate_pct: f64,
    pub frames_played: u64,
    pub frames_skipped: u64,
    pub frames_undecodable: u64,
    pub stall_total_ms: f64,
    pub keyframe_requests: u64,
    pub media_packets_sent: u64,
    pub retransmitted: u64,
    pub fec_packets_sent: u64,
    pub repaired: u64,
    pub nack_requests: u64,
    pub feedback_sent: u64,
    pub feedback_lost: u64,
    pub transport_reorders: u64,
    pub release_violations: u64,
    pub conservation: Conservation,
    pub conservation_holds: bool,
    pub events_processed: u64,
}

/// Fields compared by [`compare`]: `(name, value)`; `None` when absent.
fn comparable(s: &RunSummary) -> Vec<(&'static str, Option<f64>)> {
    let mean = |x: &Option<Stat>| x.map(|s| s.mean);
    vec![
        ("rx_total_mbytes", Some(s.rx_total_mbytes)),
        ("rx_rate_mbps_mean", mean(&s.rx_rate_mbps)),
        ("goodput_mbps_mean", mean(&s.goodput_mbps)),
        ("target_bitrate_mbps_mean", mean(&s.target_bitrate_mbps)),
        ("target_bitrate_mbps_p95", s.target_bitrate_mbps.map(|x| x.p95)),
        ("rtt_ms_mean", mean(&s.rtt_ms)),
        ("rtt_ms_p95", s.rtt_ms.map(|x| x.p95)),
        ("latency_total_ms_mean", mean(&s.latency_total_ms)),
        ("playout_plr_pct", Some(s.playout_plr_pct)),
        ("network_plr_pct", Some(s.network_plr_pct)),
        ("rtx_rate_pct", Some(s.rtx_rate_pct)),
        ("stall_total_ms", Some(s.stall_total_ms)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delta {
    pub metric: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a`.
    pub delta: Option<f64>,
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> Vec<Delta> {
    comparable(a)
        .into_iter()
        .zip(comparable(b))
        .map(|((name, x), (_, y))| Delta {
            metric: name,
            a: x,
            b: y,
            delta: x.zip(y).map(|(x, y)| y - x),
        })
        .collect()
}

pub fn format_deltas(a_label: &str, b_label: &str, deltas: &[Delta]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let mut out = format!("{:<26} {:>12} {:>12} {:>12}\n", "metric", a_label, b_label, "delta");
    for d in deltas {
        let _ = writeln!(
            out,
            "{:<26} {:>12} {:>12} {:>12}",
            d.metric,
            f(d.a),
            f(d.b),
            f(d.delta)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_is_ceil_of_duration() {
        let m = MetricsRecorder::new(SimTime::from_millis(2500));
        let rows = m.rows(SimTime::from_millis(2500));
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.last().unwrap().t_s, 3);
    }

    #[test]
    fn window_assignment() {
        let mut m = MetricsRecorder::new(SimTime::from_secs(3));
        m.on_delivery(SimTime(999_999), 1000);
        m.on_delivery(SimTime(1_000_000), 500);
        m.sample(SimTime::from_secs(1), None, 1e6, 10, 1);
        let rows = m.rows(SimTime::from_secs(3));
        assert_eq!(rows[0].rx_rate_mbps, 0.008);
        assert_eq!(rows[1].rx_rate_mbps, 0.004);
        assert_eq!(rows[1].rx_total_mbytes, 0.0015);
        assert_eq!(rows[0].rtx_rate_global_pct, 10.0);
        assert_eq!(rows[0].target_bitrate_mbps, 1.0);
    }

    #[test]
    fn latency_means_and_plr() {
        let mut m = MetricsRecorder::new(SimTime::from_secs(1));
        let ms = SimTime::from_millis;
        m.on_played(ms(100), ms(0), [ms(1), ms(2), ms(3), ms(4)]);
        m.on_played(ms(200), ms(10), [ms(1), ms(4), ms(5), ms(6)]);
        m.on_decided(ms(300), 1, 4);
        let r = &m.rows(SimTime::from_secs(1))[0];
        assert_eq!(r.latency_queuing_ms, Some(3.0));
        assert_eq!(r.plr_window_pct, 25.0);
        assert_eq!(r.stall_ms, 10.0);
        assert_eq!(r.frames_played, 2);
    }

    #[test]
    fn csv_header_and_empty_cells() {
        let m = MetricsRecorder::new(SimTime::from_secs(1));
        let csv = to_csv(&m.rows(SimTime::from_secs(1)));
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        let cells: Vec<_> = lines.next().unwrap().split(',').collect();
        assert_eq!(cells.len(), CSV_COLUMNS.len());
        assert_eq!(cells[3], "");
    }

    #[test]
    fn p95_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = Stat::of(&v).unwrap();
        assert_eq!(s.p95, 95.0);
        assert_eq!(s.mean, 50.5);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn bands() {
        assert_eq!(plr_band(0.5), "good");
        assert_eq!(plr_band(1.0), "acceptable");
        assert_eq!(plr_band(3.0), "acceptable");
        assert_eq!(plr_band(3.1), "poor");
    }

    #[test]
    fn conservation_identity() {
        let c = Conservation {
            packets_sent: 10,
            delivered: 6,
            dropped_queue: 1,
            dropped_random: 1,
            dropped_range: 1,
            in_flight_at_end: 1,
        };
        assert!(c.holds());
        assert!(!Conservation { delivered: 5, ..c }.holds());
    }
}
