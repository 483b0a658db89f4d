//! Wavelet color correction and image quality metrics.
//!
//! The Haar transform here is orthonormal, so multi-level decomposition has
//! perfect reconstruction and preserves energy exactly; images whose sides
//! are not divisible by 2^levels are symmetric-padded and cropped back on
//! reconstruction. Color correction swaps the coarse approximation band of
//! one image into the detail bands of another: detail basis functions sum to
//! zero, so the corrected output inherits the reference's per-channel means.
//!
//! SSIM uses the common 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03)
//! over valid window positions only, and exposes analytic gradients with
//! respect to both inputs for use inside photometric losses. All window
//! statistics and gradient scatters are separable convolutions.

use crate::core::ImageBuffer;
use crate::error::{EvdiError, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Multi-level orthonormal Haar decomposition. `details[l]` holds the
/// (horizontal, vertical, diagonal) bands of level `l`, finest first.
#[derive(Debug, Clone)]
pub struct HaarPyramid {
    pub approx: ImageBuffer,
    pub details: Vec<[ImageBuffer; 3]>,
    orig_width: usize,
    orig_height: usize,
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn pad_to_multiple(img: &ImageBuffer, factor: usize) -> ImageBuffer {
    let pw = img.width.div_ceil(factor) * factor;
    let ph = img.height.div_ceil(factor) * factor;
    if pw == img.width && ph == img.height {
        return img.clone();
    }
    ImageBuffer::from_fn(pw, ph, img.channels, |x, y, c| {
        img.get(mirror(x as isize, img.width), mirror(y as isize, img.height), c)
    })
    .expect("padded dims valid")
}

fn haar_level_forward(img: &ImageBuffer) -> (ImageBuffer, [ImageBuffer; 3]) {
    let (w, h, ch) = (img.width / 2, img.height / 2, img.channels);
    let mut ll = ImageBuffer::zeros(w, h, ch).unwrap();
    let mut lh = ImageBuffer::zeros(w, h, ch).unwrap();
    let mut hl = ImageBuffer::zeros(w, h, ch).unwrap();
    let mut hh = ImageBuffer::zeros(w, h, ch).unwrap();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let a = img.get(2 * x, 2 * y, c);
                let b = img.get(2 * x + 1, 2 * y, c);
                let d = img.get(2 * x, 2 * y + 1, c);
                let e = img.get(2 * x + 1, 2 * y + 1, c);
                ll.set(x, y, c, (a + b + d + e) / 2.0);
                lh.set(x, y, c, (a - b + d - e) / 2.0);
                hl.set(x, y, c, (a + b - d - e) / 2.0);
                hh.set(x, y, c, (a - b - d + e) / 2.0);
            }
        }
    }
    (ll, [lh, hl, hh])
}

fn haar_level_inverse(ll: &ImageBuffer, bands: &[ImageBuffer; 3]) -> ImageBuffer {
    let (w, h, ch) = (ll.width, ll.height, ll.channels);
    let mut out = ImageBuffer::zeros(2 * w, 2 * h, ch).unwrap();
    let [lh, hl, hh] = bands;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let s = ll.get(x, y, c);
                let dh = lh.get(x, y, c);
                let dv = hl.get(x, y, c);
                let dd = hh.get(x, y, c);
                out.set(2 * x, 2 * y, c, (s + dh + dv + dd) / 2.0);
                out.set(2 * x + 1, 2 * y, c, (s - dh + dv - dd) / 2.0);
                out.set(2 * x, 2 * y + 1, c, (s + dh - dv - dd) / 2.0);
                out.set(2 * x + 1, 2 * y + 1, c, (s - dh - dv + dd) / 2.0);
            }
        }
    }
    out
}

pub fn haar_decompose(img: &ImageBuffer, levels: usize) -> Result<HaarPyramid> {
    if levels < 1 {
        return Err(EvdiError::domain("haar levels must be >= 1"));
    }
    let factor = 1usize << levels;
    let mut current = pad_to_multiple(img, factor);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (ll, bands) = haar_level_forward(&current);
        details.push(bands);
        current = ll;
    }
    Ok(HaarPyramid {
        approx: current,
        details,
        orig_width: img.width,
        orig_height: img.height,
    })
}

pub fn haar_reconstruct(pyr: &HaarPyramid) -> Result<ImageBuffer> {
    let mut current = pyr.approx.clone();
    for bands in pyr.details.iter().rev() {
        if bands[0].width != current.width || bands[0].height != current.height {
            return Err(EvdiError::shape("pyramid band sizes inconsistent"));
        }
        current = haar_level_inverse(&current, bands);
    }
    if current.width < pyr.orig_width || current.height < pyr.orig_height {
        return Err(EvdiError::shape("pyramid smaller than recorded size"));
    }
    ImageBuffer::from_fn(pyr.orig_width, pyr.orig_height, current.channels, |x, y, c| {
        current.get(x, y, c)
    })
}

/// Keeps the fine detail bands of `detail_src` and the coarse approximation
/// band of `color_ref`; output clamped to [0, 1].
pub fn color_correct(
    detail_src: &ImageBuffer,
    color_ref: &ImageBuffer,
    levels: usize,
) -> Result<ImageBuffer> {
    detail_src.require_same_shape(color_ref, "color_correct inputs")?;
    let mut pyr = haar_decompose(detail_src, levels)?;
    let ref_pyr = haar_decompose(color_ref, levels)?;
    pyr.approx = ref_pyr.approx;
    Ok(haar_reconstruct(&pyr)?.clamped(0.0, 1.0))
}

/// Peak signal-to-noise ratio in dB, capped at 99.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, max_val: f64) -> Result<f64> {
    a.require_same_shape(b, "psnr inputs")?;
    if !(max_val > 0.0) {
        return Err(EvdiError::domain("psnr max_val must be positive"));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse < 1e-12 {
        return Ok(99.0);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(99.0))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-region separable correlation of a full-size plane with the Gaussian
/// window: output is (w-10) x (h-10).
fn conv_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0f64; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * plane[y * w + x + i];
            }
            tmp[y * vw + x] = s;
        }
    }
    let mut out = vec![0.0f64; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * vw + x];
            }
            out[y * vw + x] = s;
        }
    }
    out
}

/// Adjoint of `conv_valid`: scatters a valid-region coefficient map back to
/// the full grid through the same window weights.
fn conv_full(coef: &[f64], vw: usize, vh: usize, w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let mut tmp = vec![0.0f64; w * vh];
    for y in 0..vh {
        for x in 0..vw {
            let c = coef[y * vw + x];
            if c == 0.0 {
                continue;
            }
            for (i, &kv) in k.iter().enumerate() {
                tmp[y * w + x + i] += kv * c;
            }
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..vh {
        for x in 0..w {
            let c = tmp[y * w + x];
            if c == 0.0 {
                continue;
            }
            for (i, &kv) in k.iter().enumerate() {
                out[(y + i) * w + x] += kv * c;
            }
        }
    }
    out
}

struct SsimPlane {
    sum: f64,
    windows: usize,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, with_grad: bool) -> SsimPlane {
    let k = gaussian_kernel();
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let xx: Vec<f64> = a.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = b.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mx = conv_valid(a, w, h, &k);
    let my = conv_valid(b, w, h, &k);
    let sxx = conv_valid(&xx, w, h, &k);
    let syy = conv_valid(&yy, w, h, &k);
    let sxy = conv_valid(&xy, w, h, &k);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = vw * vh;
    let mut sum = 0.0;
    let mut c0a = vec![0.0; if with_grad { n } else { 0 }];
    let mut c0b = vec![0.0; if with_grad { n } else { 0 }];
    let mut clin = vec![0.0; if with_grad { n } else { 0 }];
    let mut cself = vec![0.0; if with_grad { n } else { 0 }];
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = vx + vy + c2;
        let s = (a1 * a2) / (b1 * b2);
        sum += s;
        if with_grad {
            let inv_bb = 1.0 / (b1 * b2);
            let u = 2.0 * (a2 - a1) * inv_bb;
            let v = 2.0 * s * (1.0 / b1 - 1.0 / b2);
            c0b[i] = ux * u - uy * v;
            c0a[i] = uy * u - ux * v;
            clin[i] = 2.0 * a1 * inv_bb;
            cself[i] = -2.0 * s / b2;
        }
    }
    if !with_grad {
        return SsimPlane {
            sum,
            windows: n,
            grad_a: Vec::new(),
            grad_b: Vec::new(),
        };
    }
    // grad_b[p] = sum over windows ( w * (c0b + clin * a[p] + cself * b[p]) )
    // and symmetrically for grad_a; each term is one window correlation.
    let f0a = conv_full(&c0a, vw, vh, w, h, &k);
    let f0b = conv_full(&c0b, vw, vh, w, h, &k);
    let flin = conv_full(&clin, vw, vh, w, h, &k);
    let fself = conv_full(&cself, vw, vh, w, h, &k);
    let mut grad_a = vec![0.0; w * h];
    let mut grad_b = vec![0.0; w * h];
    for p in 0..w * h {
        grad_a[p] = f0a[p] + b[p] * flin[p] + a[p] * fself[p];
        grad_b[p] = f0b[p] + a[p] * flin[p] + b[p] * fself[p];
    }
    SsimPlane {
        sum,
        windows: n,
        grad_a,
        grad_b,
    }
}

fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, with_grad: bool) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    a.require_same_shape(b, "ssim inputs")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(EvdiError::domain(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.width, a.height
        )));
    }
    let mut total = 0.0;
    let mut windows = 0usize;
    let mut grad_a = ImageBuffer::zeros_like(a);
    let mut grad_b = ImageBuffer::zeros_like(b);
    let mut planes = Vec::new();
    for c in 0..a.channels {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(a.channels).cloned().collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(b.channels).cloned().collect();
        let plane = ssim_plane(&pa, &pb, a.width, a.height, with_grad);
        total += plane.sum;
        windows += plane.windows;
        planes.push(plane);
    }
    let scale = 1.0 / windows as f64;
    if with_grad {
        for (c, plane) in planes.iter().enumerate() {
            for (p, (&ga, &gb)) in plane.grad_a.iter().zip(&plane.grad_b).enumerate() {
                grad_a.data[p * a.channels + c] = ga * scale;
                grad_b.data[p * b.channels + c] = gb * scale;
            }
        }
    }
    Ok((total * scale, grad_a, grad_b))
}

/// Mean SSIM over valid 11x11 windows and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _, _)| s)
}

/// SSIM plus analytic gradients with respect to each input.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    ssim_impl(a, b, true)
}
