//! Frame-rate arithmetic and the log-compression transform.
//!
//! Timing values live in integer acoustic frames; alignment sources speak
//! milliseconds or seconds. Everything here is pure and total over its
//! validated inputs.

use serde::{Deserialize, Serialize};

use crate::track::TrackError;

/// Frames per second of the acoustic feature grid.
///
/// Default 93.75 fps (24 kHz audio with hop 256).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameRate(f64);

impl FrameRate {
    pub fn new(frames_per_second: f64) -> Result<Self, TrackError> {
        if !(frames_per_second.is_finite() && frames_per_second > 0.0) {
            return Err(TrackError::InvalidRate(frames_per_second));
        }
        Ok(FrameRate(frames_per_second))
    }

    pub fn fps(&self) -> f64 {
        self.0
    }

    /// Duration of one frame in milliseconds.
    pub fn period_ms(&self) -> f64 {
        1000.0 / self.0
    }

    /// Seconds of one frame.
    pub fn period_s(&self) -> f64 {
        1.0 / self.0
    }
}

impl Default for FrameRate {
    fn default() -> Self {
        FrameRate(93.75)
    }
}

/// Milliseconds to whole frames, rounding half-up.
pub fn ms_to_frames(ms: f64, rate: FrameRate) -> Result<u32, TrackError> {
    if !ms.is_finite() || ms < 0.0 {
        return Err(TrackError::InvalidMs(ms));
    }
    let exact = ms * rate.fps() / 1000.0;
    let rounded = (exact + 0.5).floor();
    if rounded > u32::MAX as f64 {
        return Err(TrackError::FrameOverflow(ms));
    }
    Ok(rounded as u32)
}

/// Whole frames back to milliseconds.
pub fn frames_to_ms(frames: u32, rate: FrameRate) -> f64 {
    frames as f64 * 1000.0 / rate.fps()
}

/// Log-scale factor `s` of the compression transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogScale(f64);

impl LogScale {
    pub fn new(s: f64) -> Result<Self, TrackError> {
        if !(s.is_finite() && s > 0.0) {
            return Err(TrackError::InvalidScale(s));
        }
        Ok(LogScale(s))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for LogScale {
    fn default() -> Self {
        LogScale(1.0)
    }
}

/// log(1 + s*v): compresses the dynamic range of frame counts.
///
/// Exactly 0.0 iff v = 0, strictly increasing in v.
pub fn log_compress(v: u32, scale: LogScale) -> f64 {
    (1.0 + scale.value() * v as f64).ln()
}
