//! Learnable camera response function and brightness conversion.
//!
//! The response curve is monotone piecewise-linear on [0,1] with fixed
//! endpoints CRF(0)=0 and CRF(1)=1. Knot increments are the softmax of K
//! unconstrained parameters, so any parameter vector realizes a strictly
//! increasing curve and the zero vector realizes the identity exactly (equal
//! increments). Inputs are clamped to [0,1] before mapping; the clamp has
//! zero gradient outside the interval.
//!
//! Gradients are analytic. For an input landing in segment m with fraction f,
//! out = y_m + f*d_m and d out/d p_j = d_j*(a_j - out) with a_j = 1 for
//! j < m, f for j = m, 0 for j > m; d out/d x = K*d_m.

use crate::core::ImageBuffer;
use crate::error::{EvdiError, Result};

/// BT.601 luma coefficients.
pub const LUMA_COEFFS: [f64; 3] = [0.299, 0.587, 0.114];

/// Unconstrained response-curve parameters: `knots` increments per group,
/// one group shared across channels or three per-channel groups.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    raw: Vec<f64>,
    knots: usize,
    groups: usize,
}

impl CrfParams {
    /// Zero-initialized params realize the identity map.
    pub fn identity(knots: usize, per_channel: bool) -> Result<Self> {
        if knots < 2 {
            return Err(EvdiError::config("crf needs at least 2 knots"));
        }
        let groups = if per_channel { 3 } else { 1 };
        Ok(CrfParams {
            raw: vec![0.0; knots * groups],
            knots,
            groups,
        })
    }

    pub fn from_raw(raw: Vec<f64>, knots: usize, groups: usize) -> Result<Self> {
        if knots < 2 || !(groups == 1 || groups == 3) || raw.len() != knots * groups {
            return Err(EvdiError::config("inconsistent crf parameter layout"));
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(EvdiError::numeric("non-finite crf parameter"));
        }
        Ok(CrfParams { raw, knots, groups })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    pub fn knots(&self) -> usize {
        self.knots
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Knot ordinates y_0..y_K per group; y_0 = 0 and y_K = 1 exactly.
    pub fn realize(&self) -> Vec<Vec<f64>> {
        let k = self.knots;
        (0..self.groups)
            .map(|g| {
                let p = &self.raw[g * k..(g + 1) * k];
                let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = p.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = e.iter().sum();
                let mut y = Vec::with_capacity(k + 1);
                y.push(0.0);
                let mut c = 0.0;
                for v in &e[..k - 1] {
                    c += v;
                    y.push(c / total);
                }
                y.push(1.0);
                y
            })
            .collect()
    }

    /// (x, per-group y) rows of the realized curve at the knot abscissae.
    pub fn knot_table(&self) -> Vec<(f64, Vec<f64>)> {
        let curves = self.realize();
        (0..=self.knots)
            .map(|m| {
                let x = m as f64 / self.knots as f64;
                (x, curves.iter().map(|y| y[m]).collect())
            })
            .collect()
    }

    fn group_for_channel(&self, c: usize, channels: usize) -> usize {
        if self.groups == 3 && channels == 3 {
            c
        } else {
            0
        }
    }
}

/// Forward record of one `crf_apply`: per value the segment index, fraction,
/// and input slope, plus the realized knots the gradients refer to.
#[derive(Debug, Clone)]
pub struct CrfGrad {
    curves: Vec<Vec<f64>>,
    knots: usize,
    groups: usize,
    channels: usize,
    seg: Vec<u16>,
    frac: Vec<f64>,
    slope: Vec<f64>,
}

/// Applies the response curve per value. 1-channel inputs always use group 0.
pub fn crf_apply(params: &CrfParams, img: &ImageBuffer) -> (ImageBuffer, CrfGrad) {
    let curves = params.realize();
    let k = params.knots;
    let n = img.data.len();
    let mut out = vec![0.0f64; n];
    let mut seg = vec![0u16; n];
    let mut frac = vec![0.0f64; n];
    let mut slope = vec![0.0f64; n];
    for (i, &x) in img.data.iter().enumerate() {
        let g = params.group_for_channel(i % img.channels, img.channels);
        let y = &curves[g];
        let (m, f, o, s);
        if x <= 0.0 {
            m = 0;
            f = 0.0;
            o = 0.0;
            s = if x < 0.0 { 0.0 } else { k as f64 * (y[1] - y[0]) };
        } else if x >= 1.0 {
            m = k - 1;
            f = 1.0;
            o = 1.0;
            s = if x > 1.0 {
                0.0
            } else {
                k as f64 * (y[k] - y[k - 1])
            };
        } else {
            let sx = x * k as f64;
            m = (sx.floor() as usize).min(k - 1);
            f = sx - m as f64;
            let d = y[m + 1] - y[m];
            o = y[m] + f * d;
            s = k as f64 * d;
        }
        out[i] = o;
        seg[i] = m as u16;
        frac[i] = f;
        slope[i] = s;
    }
    let mapped = ImageBuffer {
        width: img.width,
        height: img.height,
        channels: img.channels,
        data: out,
    };
    let grad = CrfGrad {
        curves,
        knots: k,
        groups: params.groups,
        channels: img.channels,
        seg,
        frac,
        slope,
    };
    (mapped, grad)
}

/// Backprop through `crf_apply`: returns the input gradient and the parameter
/// gradient laid out like `CrfParams::raw`.
pub fn backprop_crf(grad_out: &ImageBuffer, grad: &CrfGrad) -> Result<(ImageBuffer, Vec<f64>)> {
    if grad_out.data.len() != grad.seg.len() || grad_out.channels != grad.channels {
        return Err(EvdiError::shape("crf gradient shape mismatch"));
    }
    let k = grad.knots;
    let mut grad_in = Vec::with_capacity(grad_out.data.len());
    let mut grad_p = vec![0.0f64; k * grad.groups];
    for (i, &go) in grad_out.data.iter().enumerate() {
        grad_in.push(go * grad.slope[i]);
        if go == 0.0 {
            continue;
        }
        let g = if grad.groups == 3 && grad.channels == 3 {
            i % grad.channels
        } else {
            0
        };
        let y = &grad.curves[g];
        let m = grad.seg[i] as usize;
        let f = grad.frac[i];
        let out = y[m] + f * (y[m + 1] - y[m]);
        let gp = &mut grad_p[g * k..(g + 1) * k];
        for (j, gpj) in gp.iter_mut().enumerate() {
            let d = y[j + 1] - y[j];
            let a = if j < m {
                1.0
            } else if j == m {
                f
            } else {
                0.0
            };
            *gpj += go * d * (a - out);
        }
    }
    let gi = ImageBuffer {
        width: grad_out.width,
        height: grad_out.height,
        channels: grad_out.channels,
        data: grad_in,
    };
    Ok((gi, grad_p))
}

/// BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B.
pub fn luma(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(EvdiError::shape("luma needs a 3-channel image"));
    }
    let mut data = Vec::with_capacity(img.width * img.height);
    for px in img.data.chunks_exact(3) {
        data.push(LUMA_COEFFS[0] * px[0] + LUMA_COEFFS[1] * px[1] + LUMA_COEFFS[2] * px[2]);
    }
    ImageBuffer::new(img.width, img.height, 1, data)
}

/// Backprop through `luma`: each channel receives its coefficient.
pub fn backprop_luma(grad_out: &ImageBuffer) -> Result<ImageBuffer> {
    if grad_out.channels != 1 {
        return Err(EvdiError::shape("luma gradient must be 1-channel"));
    }
    let mut data = Vec::with_capacity(grad_out.data.len() * 3);
    for &g in &grad_out.data {
        for c in LUMA_COEFFS {
            data.push(c * g);
        }
    }
    ImageBuffer::new(grad_out.width, grad_out.height, 3, data)
}

/// Forward record of one `log_brightness`.
#[derive(Debug, Clone)]
pub struct LogBrightnessGrad {
    crf: CrfGrad,
    /// d log / d luma per pixel: 1/Y above the floor, 0 below.
    inv: Vec<f64>,
}

/// log(max(luma(CRF(img)), eps_floor)). Values under the floor sit in a
/// zero-gradient region.
pub fn log_brightness(
    params: &CrfParams,
    img: &ImageBuffer,
    eps_floor: f64,
) -> Result<(ImageBuffer, LogBrightnessGrad)> {
    if !(eps_floor > 0.0) {
        return Err(EvdiError::domain("eps_floor must be positive"));
    }
    let (mapped, crf_grad) = crf_apply(params, img);
    let y = luma(&mapped)?;
    let mut out = Vec::with_capacity(y.data.len());
    let mut inv = Vec::with_capacity(y.data.len());
    for &v in &y.data {
        if v > eps_floor {
            out.push(v.ln());
            inv.push(1.0 / v);
        } else {
            out.push(eps_floor.ln());
            inv.push(0.0);
        }
    }
    let img_out = ImageBuffer::new(y.width, y.height, 1, out)?;
    Ok((img_out, LogBrightnessGrad { crf: crf_grad, inv }))
}

/// Backprop through `log_brightness`: input-image gradient plus CRF
/// parameter gradient.
pub fn backprop_log_brightness(
    grad_out: &ImageBuffer,
    grad: &LogBrightnessGrad,
) -> Result<(ImageBuffer, Vec<f64>)> {
    if grad_out.channels != 1 || grad_out.data.len() != grad.inv.len() {
        return Err(EvdiError::shape("log brightness gradient shape mismatch"));
    }
    let mut gl = grad_out.clone();
    for (g, &iv) in gl.data.iter_mut().zip(&grad.inv) {
        *g *= iv;
    }
    let grad_mapped = backprop_luma(&gl)?;
    backprop_crf(&grad_mapped, &grad.crf)
}
