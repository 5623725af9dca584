//! Sender-side bitrate controllers.

mod gcc;

pub use gcc::{
    loss_update, Aimd, DelayKalman, Gcc, GccConfig, LinkCapacityEstimator, OveruseDetector, Signal,
};

use serde::{Deserialize, Serialize};

use crate::feedback::{PacketResult, ReceiverReport};
use crate::media::{MAX_BITRATE_BPS, MIN_BITRATE_BPS};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Increase,
    Hold,
    Decrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateDecision {
    pub target_bps: f64,
    /// AIMD region used for this decision, for controllers that have one.
    pub region: Option<Region>,
}

pub fn clamp_rate(bps: f64) -> f64 {
    if bps.is_nan() {
        return MIN_BITRATE_BPS as f64;
    }
    bps.clamp(MIN_BITRATE_BPS as f64, MAX_BITRATE_BPS as f64)
}

/// A bitrate decision layer driven from the event loop.
pub trait RateController: Send {
    fn name(&self) -> &'static str;

    fn on_twcc(&mut self, _results: &[PacketResult], _now: SimTime) {}

    fn on_rr(&mut self, _rr: &ReceiverReport, _rtt: Option<SimTime>, _now: SimTime) {}

    fn decide(&mut self, now: SimTime) -> RateDecision;

    /// Rate imposed from outside (agent bridge). Ignored by autonomous controllers.
    fn set_external(&mut self, _bps: f64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Gcc,
    Fixed,
    Scripted,
    Bridge,
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gcc" => Ok(Self::Gcc),
            "fixed" => Ok(Self::Fixed),
            "scripted" | "scripted-aggressive" => Ok(Self::Scripted),
            "bridge" => Ok(Self::Bridge),
            other => Err(format!("unknown controller `{other}` (gcc, fixed, scripted, bridge)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedController {
    rate: f64,
}

impl FixedController {
    pub fn new(rate_bps: f64) -> Self {
        Self {
            rate: clamp_rate(rate_bps),
        }
    }
}

impl RateController for FixedController {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn decide(&mut self, _now: SimTime) -> RateDecision {
        RateDecision {
            target_bps: self.rate,
            region: None,
        }
    }
}

/// Step function of time; before the first point the first rate applies.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    table: Vec<(SimTime, f64)>,
}

impl ScriptedController {
    pub fn new(mut table: Vec<(SimTime, f64)>) -> Self {
        table.sort_by_key(|p| p.0);
        if table.is_empty() {
            table.push((SimTime::ZERO, MAX_BITRATE_BPS as f64));
        }
        Self { table }
    }

    /// Ramps from 1 Mbps to the 10 Mbps ceiling within 10 s and stays there.
    pub fn aggressive() -> Self {
        Self::new(aggressive_script())
    }

    pub fn rate_at(&self, now: SimTime) -> f64 {
        let i = self.table.partition_point(|p| p.0 <= now);
        clamp_rate(self.table[i.saturating_sub(1)].1)
    }
}

pub fn aggressive_script() -> Vec<(SimTime, f64)> {
    (0..=10u64)
        .map(|s| (SimTime::from_secs(s), 1e6 + 0.9e6 * s as f64))
        .collect()
}

impl RateController for ScriptedController {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn decide(&mut self, now: SimTime) -> RateDecision {
        RateDecision {
            target_bps: self.rate_at(now),
            region: None,
        }
    }
}

/// Holds whatever rate the bridge last applied.
#[derive(Debug, Clone)]
pub struct ExternalController {
    rate: f64,
}

impl ExternalController {
    pub fn new(start_bps: f64) -> Self {
        Self {
            rate: clamp_rate(start_bps),
        }
    }
}

impl RateController for ExternalController {
    fn name(&self) -> &'static str {
        "bridge"
    }

    fn decide(&mut self, _now: SimTime) -> RateDecision {
        RateDecision {
            target_bps: self.rate,
            region: None,
        }
    }

    fn set_external(&mut self, bps: f64) {
        self.rate = clamp_rate(bps);
    }
}
