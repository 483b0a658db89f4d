//! Event camera simulator.
//!
//! Follows the standard threshold-crossing model: each pixel tracks a
//! reference log-intensity; when the (linearly interpolated) log-intensity of
//! an incoming frame crosses the reference by k whole thresholds, k events
//! fire whose timestamps are placed by inverting the linear-in-log segment
//! between the two frames, and the reference advances by k * theta * sign.
//! Intensities are floored at `eps_floor` before the log so dark pixels stay
//! finite.
//!
//! The simulator is fully deterministic: the final stream is sorted by
//! (t, y, x, polarity).

use crate::core::{event_order, Event, EventStream, ExposureWindow, ImageBuffer};
use crate::error::{EvdiError, Result};

/// Uniformly or arbitrarily timestamped stack of grayscale frames spanning
/// one exposure window.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<ImageBuffer>,
    timestamps: Vec<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageBuffer>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(EvdiError::domain(format!(
                "frame sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if frames.len() != timestamps.len() {
            return Err(EvdiError::shape(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        for (i, f) in frames.iter().enumerate() {
            if f.channels != 1 {
                return Err(EvdiError::shape(format!(
                    "frame {i} has {} channels, expected grayscale",
                    f.channels
                )));
            }
            if f.width != w || f.height != h {
                return Err(EvdiError::shape(format!(
                    "frame {i} is {}x{}, expected {w}x{h}",
                    f.width, f.height
                )));
            }
        }
        if timestamps.iter().any(|t| !t.is_finite())
            || timestamps.windows(2).any(|p| p[1] <= p[0])
        {
            return Err(EvdiError::domain(
                "frame timestamps must be finite and strictly increasing",
            ));
        }
        Ok(FrameSequence { frames, timestamps })
    }

    pub fn frames(&self) -> &[ImageBuffer] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }

    /// Exposure window spanned by the sequence.
    pub fn window(&self) -> ExposureWindow {
        ExposureWindow::from_bounds(self.timestamps[0], *self.timestamps.last().unwrap())
            .expect("timestamps strictly increasing")
    }
}

/// Log-intensity with the dark floor applied.
#[inline]
pub fn log_intensity(v: f64, eps_floor: f64) -> f64 {
    v.max(eps_floor).ln()
}

/// Simulates a threshold event stream from a frame sequence.
pub fn simulate_events(seq: &FrameSequence, theta: f64, eps_floor: f64) -> Result<EventStream> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(EvdiError::domain(format!("theta must be > 0, got {theta}")));
    }
    if !(eps_floor.is_finite() && eps_floor > 0.0) {
        return Err(EvdiError::domain(format!(
            "eps_floor must be > 0, got {eps_floor}"
        )));
    }
    let (width, height) = seq.resolution();
    let ts = seq.timestamps();
    let mut events: Vec<Event> = Vec::new();

    for y in 0..height {
        for x in 0..width {
            let mut l_prev = log_intensity(seq.frames()[0].get(x, y, 0), eps_floor);
            let mut l_ref = l_prev;
            for k in 1..ts.len() {
                let l_k = log_intensity(seq.frames()[k].get(x, y, 0), eps_floor);
                let diff = l_k - l_ref;
                let count = (diff.abs() / theta).floor() as i64;
                if count > 0 {
                    let sign = if diff > 0.0 { 1.0 } else { -1.0 };
                    let polarity = if diff > 0.0 { 1i8 } else { -1i8 };
                    // Invert the linear segment (t_{k-1}, l_prev) -> (t_k, l_k)
                    // at each crossed level l_ref + m * theta * sign.
                    let slope = (ts[k] - ts[k - 1]) / (l_k - l_prev);
                    for m in 1..=count {
                        let level = l_ref + sign * theta * m as f64;
                        let t = ts[k - 1] + (level - l_prev) * slope;
                        events.push(Event {
                            // Crossings live strictly inside (t_{k-1}, t_k];
                            // clamp guards against rounding at the edges.
                            t: t.clamp(ts[k - 1], ts[k]),
                            x: x as u16,
                            y: y as u16,
                            polarity,
                        });
                    }
                    l_ref += sign * theta * count as f64;
                }
                l_prev = l_k;
            }
        }
    }

    events.sort_by(event_order);
    EventStream::new(events, width, height, seq.window())
}
