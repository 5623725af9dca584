//! Abstract constant-bitrate video encoder.
//!
//! Frames are sized from a per-frame byte budget whose rounding remainder is
//! carried forward, so the emitted byte count never drifts from the target.
//! A keyframe is `keyframe_size_ratio` times its budget; the excess is repaid
//! by the following delta frames within one keyframe period (one second of
//! frames when the GOP is infinite).

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::sim::{RngStream, SimTime};

pub const MIN_BITRATE_BPS: u64 = 400_000;
pub const MAX_BITRATE_BPS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub fps: u32,
    pub target_bitrate: u64,
    /// `None` is an infinite GOP: only frame 0 (and requested frames) are keyframes.
    pub keyframe_interval: Option<u32>,
    pub keyframe_size_ratio: f64,
    pub encode_latency: SimTime,
    pub bitrate_jitter: f64,
    pub min_bitrate: u64,
    pub max_bitrate: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            fps: 20,
            target_bitrate: MAX_BITRATE_BPS,
            keyframe_interval: None,
            keyframe_size_ratio: 4.0,
            encode_latency: SimTime::from_millis(1),
            bitrate_jitter: 0.0,
            min_bitrate: MIN_BITRATE_BPS,
            max_bitrate: MAX_BITRATE_BPS,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fps == 0 {
            return Err(ConfigError::new("encoder.fps", "must be > 0"));
        }
        if self.min_bitrate == 0 || self.min_bitrate > self.max_bitrate {
            return Err(ConfigError::new(
                "encoder.bitrate_bps",
                "min_bitrate must be positive and <= max_bitrate",
            ));
        }
        if !(self.min_bitrate..=self.max_bitrate).contains(&self.target_bitrate) {
            return Err(ConfigError::new(
                "encoder.bitrate_bps",
                format!(
                    "must be within [{}, {}]",
                    self.min_bitrate, self.max_bitrate
                ),
            ));
        }
        if self.keyframe_interval == Some(0) {
            return Err(ConfigError::new("encoder.keyframe_interval", "must be >= 1"));
        }
        if !(self.keyframe_size_ratio >= 1.0) || !self.keyframe_size_ratio.is_finite() {
            return Err(ConfigError::new("encoder.keyframe_ratio", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.bitrate_jitter) {
            return Err(ConfigError::new("encoder.jitter", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn frame_interval(&self) -> SimTime {
        SimTime(1_000_000 / self.fps as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MediaFrame {
    pub frame_id: u64,
    pub capture_time: SimTime,
    pub encode_done_time: SimTime,
    pub size: usize,
    pub is_keyframe: bool,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    rate: u64,
    next_frame_id: u64,
    last_capture: Option<SimTime>,
    // carried budget remainder in units of 1/(8*fps) bytes
    remainder: u64,
    keyframe_requested: bool,
    debt_bytes: u64,
    debt_frames_left: u64,
    keyframes_emitted: u64,
    rng: RngStream,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: RngStream) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            rate: config.target_bitrate,
            config,
            next_frame_id: 0,
            last_capture: None,
            remainder: 0,
            keyframe_requested: false,
            debt_bytes: 0,
            debt_frames_left: 0,
            keyframes_emitted: 0,
            rng,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn target_bitrate(&self) -> u64 {
        self.rate
    }

    pub fn keyframes_emitted(&self) -> u64 {
        self.keyframes_emitted
    }

    /// Clamps into `[min_bitrate, max_bitrate]` and returns the applied rate.
    /// The frame being emitted now (if any) keeps its size.
    pub fn set_target_bitrate(&mut self, rate_bps: f64) -> Result<u64, ConfigError> {
        if !(rate_bps > 0.0) || !rate_bps.is_finite() {
            return Err(ConfigError::new(
                "encoder.bitrate_bps",
                format!("target bitrate {rate_bps} must be positive"),
            ));
        }
        let clamped = rate_bps
            .round()
            .clamp(self.config.min_bitrate as f64, self.config.max_bitrate as f64)
            as u64;
        self.rate = clamped;
        Ok(clamped)
    }

    /// The next emitted frame becomes a keyframe (picture-loss recovery).
    pub fn request_keyframe(&mut self) {
        self.keyframe_requested = true;
    }

    pub fn encode_latency_of(&self, _frame: &MediaFrame) -> SimTime {
        self.config.encode_latency
    }

    fn period_frames(&self) -> u64 {
        match self.config.keyframe_interval {
            Some(n) => n as u64,
            None => self.config.fps as u64,
        }
    }

    pub fn emit_frame(&mut self, now: SimTime) -> MediaFrame {
        if let Some(prev) = self.last_capture {
            assert!(now > prev, "capture times must strictly increase");
        }
        let frame_id = self.next_frame_id;
        self.next_frame_id += 1;
        self.last_capture = Some(now);

        let scheduled_key = match self.config.keyframe_interval {
            Some(n) => frame_id.is_multiple_of(n as u64),
            None => frame_id == 0,
        };
        let is_keyframe = scheduled_key || self.keyframe_requested;
        self.keyframe_requested = false;

        let denom = 8 * self.config.fps as u64;
        let total = self.rate + self.remainder;
        let budget = (total / denom).max(1);
        self.remainder = total % denom;

        let mut size = if is_keyframe && self.period_frames() > 1 {
            self.keyframes_emitted += 1;
            let key = ((budget as f64) * self.config.keyframe_size_ratio).round() as u64;
            self.debt_bytes += key.saturating_sub(budget);
            self.debt_frames_left = self.period_frames() - 1;
            key
        } else {
            if is_keyframe {
                self.keyframes_emitted += 1;
            }
            let mut s = budget;
            if self.debt_bytes > 0 && !is_keyframe {
                let frames = self.debt_frames_left.max(1);
                let repay = self.debt_bytes.div_ceil(frames).min(budget - 1);
                s -= repay;
                self.debt_bytes -= repay;
                self.debt_frames_left = self.debt_frames_left.saturating_sub(1);
            }
            s
        };

        if self.config.bitrate_jitter > 0.0 {
            let j = self.config.bitrate_jitter;
            let factor = 1.0 + self.rng.uniform(-j, j).unwrap_or(0.0);
            size = ((size as f64) * factor).round().max(1.0) as u64;
        }

        MediaFrame {
            frame_id,
            capture_time: now,
            encode_done_time: now + self.config.encode_latency,
            size: size as usize,
            is_keyframe,
        }
    }
}

/// Capture time of the `n`-th frame relative to the stream start.
pub fn capture_offset(n: u64, fps: u32) -> SimTime {
    SimTime(n * 1_000_000 / fps as u64)
}
