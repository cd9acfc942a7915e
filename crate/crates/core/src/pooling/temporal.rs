use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Window geometry around a chunk center: `before_s` seconds of past context
/// (offsets in `[-before_s, 0)`) and `after_s` seconds of future context
/// (offsets from 0 onward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalWindow {
    pub frame_rate: f64,
    pub before_s: f64,
    pub after_s: f64,
}

impl TemporalWindow {
    /// Symmetric window of total length `window_s`.
    pub fn centered(frame_rate: f64, window_s: f64) -> Self {
        Self {
            frame_rate,
            before_s: window_s / 2.0,
            after_s: window_s / 2.0,
        }
    }

    pub fn frames_before(&self) -> usize {
        (self.before_s * self.frame_rate).round() as usize
    }

    pub fn total_frames(&self) -> usize {
        ((self.before_s + self.after_s) * self.frame_rate).round() as usize
    }

    pub fn frames_after(&self) -> usize {
        self.total_frames() - self.frames_before()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return Err(Error::invalid(format!("frame rate must be > 0, got {}", self.frame_rate)));
        }
        if !(self.before_s >= 0.0 && self.after_s >= 0.0) {
            return Err(Error::invalid("window extents must be non-negative"));
        }
        for (name, secs) in [("before", self.before_s), ("after", self.after_s)] {
            let frames = secs * self.frame_rate;
            if (frames - frames.round()).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "{name} extent {secs}s is not a whole number of frames at {} fps",
                    self.frame_rate
                )));
            }
        }
        if self.frames_before() == 0 || self.frames_after() == 0 {
            return Err(Error::invalid(format!(
                "window [-{}s, {}s] leaves an empty half at {} fps",
                self.before_s, self.after_s, self.frame_rate
            )));
        }
        Ok(())
    }
}

/// Splits temporally ordered frames into past (offset < 0) and future
/// (offset ≥ 0) halves. The center frame opens the future half.
pub fn temporal_split(
    x: &Matrix,
    frame_rate: f64,
    before_s: f64,
    after_s: f64,
) -> Result<(Matrix, Matrix)> {
    let window = TemporalWindow {
        frame_rate,
        before_s,
        after_s,
    };
    window.validate()?;
    if x.rows() != window.total_frames() {
        return Err(Error::shape(
            "temporal_split",
            format!("{} frames", window.total_frames()),
            x.rows(),
        ));
    }
    let split = window.frames_before();
    Ok((x.slice_rows(0..split), x.slice_rows(split..x.rows())))
}
