//! Event-based double integral (EDI) deblurring.
//!
//! A blurry exposure is the time average of the latent intensity, and events
//! relate any latent instant to the reference instant t_ref through
//! I(h) = I(t_ref) * exp(theta * E(h)), where E(h) is the signed event count
//! between t_ref and h. Averaging that relation over the window gives a
//! per-pixel weight
//!
//!     W(t_ref) = (1/tau) * integral exp(theta * E(h)) dh,
//!
//! so the latent at t_ref is simply blurry / W. The integrand is piecewise
//! constant with breakpoints at the event timestamps, so the integral is
//! computed exactly by walking the per-pixel event list; no quadrature is
//! involved.
//!
//! Sign conventions: E(h) = C(h) - C(t_ref-) with C the running polarity sum,
//! which counts an event exactly at t_ref toward the forward direction and
//! makes backward counts the exact negation of forward ones. Warping between
//! two instants uses the directed count so warp(a -> b) then warp(b -> a) is
//! the identity.

use crate::core::{EventStream, ExposureWindow, ImageBuffer};
use crate::error::{EvdiError, Result};

/// Minimum admissible integral weight; anything smaller is floored and
/// reported, since dividing by it would blow up the latent estimate.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Per-pixel EDI weights W(t_ref) for one reference instant.
#[derive(Debug, Clone)]
pub struct EdiWeights {
    pub width: usize,
    pub height: usize,
    pub t_ref: f64,
    pub data: Vec<f64>,
}

impl EdiWeights {
    pub fn as_image(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }
}

/// Validates a reference time against the window and returns it snapped onto
/// [start, end]. Times recomputed from mid/tau or parsed from files land a few
/// ulps outside the window; a relative slack absorbs that without admitting
/// genuinely foreign times.
fn check_ref_time(window: ExposureWindow, t_ref: f64) -> Result<f64> {
    let tol = 1e-9 * window.tau;
    if !t_ref.is_finite() || t_ref < window.start() - tol || t_ref > window.end() + tol {
        return Err(EvdiError::domain(format!(
            "reference time {t_ref} outside window [{}, {}]",
            window.start(),
            window.end()
        )));
    }
    Ok(t_ref.clamp(window.start(), window.end()))
}

/// Exact per-pixel integral weights over `window` relative to `t_ref`.
pub fn edi_weights(
    stream: &EventStream,
    window: ExposureWindow,
    theta: f64,
    t_ref: f64,
) -> Result<EdiWeights> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(EvdiError::domain(format!("theta must be > 0, got {theta}")));
    }
    let t_ref = check_ref_time(window, t_ref)?;
    let (width, height) = stream.resolution();
    let (start, end) = (window.start(), window.end());
    let tau = window.tau;
    let mut data = vec![0.0f64; width * height];
    let mut floored = 0usize;

    for y in 0..height {
        for x in 0..width {
            let (times, pols) = stream.pixel_events(x, y)?;
            // Running count C(h) counts events with time <= h; the baseline
            // subtracts C(t_ref-) so an event exactly at t_ref counts forward.
            let base: i64 = times
                .iter()
                .zip(pols)
                .take_while(|(&t, _)| t < t_ref)
                .map(|(_, &p)| p as i64)
                .sum();
            let mut count: i64 = times
                .iter()
                .zip(pols)
                .take_while(|(&t, _)| t <= start)
                .map(|(_, &p)| p as i64)
                .sum();
            let first_inside = times.partition_point(|&t| t <= start);
            let mut prev = start;
            let mut integral = 0.0;
            for k in first_inside..times.len() {
                let t = times[k];
                if t > end {
                    break;
                }
                integral += (theta * (count - base) as f64).exp() * (t - prev);
                count += pols[k] as i64;
                prev = t;
            }
            integral += (theta * (count - base) as f64).exp() * (end - prev);
            let mut w = integral / tau;
            if w < WEIGHT_FLOOR {
                w = WEIGHT_FLOOR;
                floored += 1;
            }
            data[y * width + x] = w;
        }
    }
    if floored > 0 {
        log::warn!(
            "edi_weights: floored {floored} pixel weight(s) at {WEIGHT_FLOOR:e}; \
             latent estimates there are unreliable"
        );
    }
    Ok(EdiWeights {
        width,
        height,
        t_ref,
        data,
    })
}

/// Latent grayscale estimate at `weights.t_ref`: blurry / W, pixel-wise.
pub fn edi_deblur(blurry: &ImageBuffer, weights: &EdiWeights) -> Result<ImageBuffer> {
    if blurry.channels != 1 {
        return Err(EvdiError::shape("edi_deblur expects a grayscale image"));
    }
    if blurry.width != weights.width || blurry.height != weights.height {
        return Err(EvdiError::shape(format!(
            "blurry {}x{} vs weights {}x{}",
            blurry.width, blurry.height, weights.width, weights.height
        )));
    }
    let data = blurry
        .data
        .iter()
        .zip(&weights.data)
        .map(|(b, w)| b / w)
        .collect();
    ImageBuffer::new(blurry.width, blurry.height, 1, data)
}

/// Color latent estimate: the shared single-channel weights divide every
/// channel (events carry no chroma).
pub fn edi_deblur_color(blurry: &ImageBuffer, weights: &EdiWeights) -> Result<ImageBuffer> {
    if blurry.width != weights.width || blurry.height != weights.height {
        return Err(EvdiError::shape(format!(
            "blurry {}x{} vs weights {}x{}",
            blurry.width, blurry.height, weights.width, weights.height
        )));
    }
    let mut out = blurry.clone();
    for y in 0..blurry.height {
        for x in 0..blurry.width {
            let w = weights.data[y * blurry.width + x];
            for c in 0..blurry.channels {
                let i = out.idx(x, y, c);
                out.data[i] /= w;
            }
        }
    }
    Ok(out)
}

/// Per-pixel multiplicative factors exp(theta * E(t_from -> t_to)).
pub fn warp_factors(
    stream: &EventStream,
    theta: f64,
    t_from: f64,
    t_to: f64,
) -> Result<Vec<f64>> {
    let window = stream.window();
    let t_from = check_ref_time(window, t_from)?;
    let t_to = check_ref_time(window, t_to)?;
    let (width, height) = stream.resolution();
    let mut out = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            let n = stream.signed_count(x, y, t_from, t_to)?;
            out[y * width + x] = (theta * n as f64).exp();
        }
    }
    Ok(out)
}

/// Transports a latent image between instants: I(t_to) = I(t_from) * factor.
/// Applying the reverse warp afterwards restores the input exactly.
pub fn warp_latent(
    latent: &ImageBuffer,
    stream: &EventStream,
    theta: f64,
    t_from: f64,
    t_to: f64,
) -> Result<ImageBuffer> {
    let (width, height) = stream.resolution();
    if latent.width != width || latent.height != height {
        return Err(EvdiError::shape(format!(
            "latent {}x{} vs stream {width}x{height}",
            latent.width, latent.height
        )));
    }
    let factors = warp_factors(stream, theta, t_from, t_to)?;
    let mut out = latent.clone();
    for y in 0..height {
        for x in 0..width {
            let f = factors[y * width + x];
            for c in 0..latent.channels {
                let i = out.idx(x, y, c);
                out.data[i] *= f;
            }
        }
    }
    Ok(out)
}

/// Sharp grayscale targets at each requested timestep: deblur at the window
/// midpoint, then transport to each t_i with the event warp.
pub fn edi_targets(
    blurry: &ImageBuffer,
    stream: &EventStream,
    window: ExposureWindow,
    theta: f64,
    timesteps: &[f64],
) -> Result<Vec<ImageBuffer>> {
    let timesteps = timesteps
        .iter()
        .map(|&t| check_ref_time(window, t))
        .collect::<Result<Vec<f64>>>()?;
    let weights = edi_weights(stream, window, theta, window.mid)?;
    let latent = edi_deblur(blurry, &weights)?;
    timesteps
        .iter()
        .map(|&t| warp_latent(&latent, stream, theta, window.mid, t))
        .collect()
}
