//! Differentiable 2D scene.
//!
//! The scene is a learnable padded canvas sampled through an SE(2) camera
//! pose with bilinear interpolation: a lightweight stand-in for a splat- or
//! field-based scene representation that keeps rendering exactly linear in
//! the canvas values. Rotation is about the view center, so the identity pose
//! renders the central crop and integer translations shift the crop exactly.
//!
//! Rendering records the four tap indices and weights per output pixel, which
//! makes the backward pass an exact scatter of upstream gradients; the same
//! footprint serves both the color canvas and the residual feature canvas.
//! Sampling clamps to the canvas edge; the canvas should be padded past the
//! largest trajectory displacement so taps stay interior.

use crate::core::{ImageBuffer, Pose2};
use crate::error::{EvdiError, Result};

/// Which learnable buffer a render samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderTarget {
    Color,
    Residual,
}

/// Learnable scene: color canvas plus a residual feature canvas sharing the
/// same geometry. `canvas_origin` is the world coordinate of canvas texel
/// (0, 0); world coordinates coincide with view pixel coordinates under the
/// identity pose.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub canvas: ImageBuffer,
    pub residual: ImageBuffer,
    pub canvas_origin: (f64, f64),
    pub view_width: usize,
    pub view_height: usize,
}

impl SceneModel {
    /// Canvas sized view + 2 * padding per side, origin at (-padding,
    /// -padding); color zero-initialized, residual zero-initialized.
    pub fn new(
        view_width: usize,
        view_height: usize,
        padding: usize,
        residual_channels: usize,
    ) -> Result<Self> {
        let cw = view_width + 2 * padding;
        let ch = view_height + 2 * padding;
        Ok(SceneModel {
            canvas: ImageBuffer::zeros(cw, ch, 3)?,
            residual: ImageBuffer::zeros(cw, ch, residual_channels)?,
            canvas_origin: (-(padding as f64), -(padding as f64)),
            view_width,
            view_height,
        })
    }

    pub fn with_canvas(
        canvas: ImageBuffer,
        view_width: usize,
        view_height: usize,
        residual_channels: usize,
    ) -> Result<Self> {
        if canvas.channels != 3 {
            return Err(EvdiError::shape("scene canvas must have 3 channels"));
        }
        if canvas.width < view_width || canvas.height < view_height {
            return Err(EvdiError::shape(format!(
                "canvas {}x{} smaller than view {view_width}x{view_height}",
                canvas.width, canvas.height
            )));
        }
        let pad_x = (canvas.width - view_width) / 2;
        let pad_y = (canvas.height - view_height) / 2;
        let residual = ImageBuffer::zeros(canvas.width, canvas.height, residual_channels)?;
        Ok(SceneModel {
            canvas,
            residual,
            canvas_origin: (-(pad_x as f64), -(pad_y as f64)),
            view_width,
            view_height,
        })
    }

    fn buffer(&self, which: RenderTarget) -> &ImageBuffer {
        match which {
            RenderTarget::Color => &self.canvas,
            RenderTarget::Residual => &self.residual,
        }
    }

    #[inline]
    pub fn view_center(&self) -> (f64, f64) {
        (
            (self.view_width as f64 - 1.0) / 2.0,
            (self.view_height as f64 - 1.0) / 2.0,
        )
    }
}

/// Bilinear sampling footprint of one render: four (texel, weight) taps per
/// output pixel. Weights are non-negative and sum to one.
#[derive(Debug, Clone)]
pub struct RenderGrad {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub view_width: usize,
    pub view_height: usize,
    /// Per output pixel: [(canvas pixel index, weight); 4].
    taps: Vec<[(u32, f64); 4]>,
}

impl RenderGrad {
    pub fn taps(&self, view_x: usize, view_y: usize) -> &[(u32, f64); 4] {
        &self.taps[view_y * self.view_width + view_x]
    }
}

/// Renders the selected buffer at `pose`. Output pixel (x, y) samples the
/// canvas at pose applied to the view-centered coordinate; samples outside
/// the canvas clamp to the edge.
pub fn render(model: &SceneModel, pose: &Pose2, which: RenderTarget) -> (ImageBuffer, RenderGrad) {
    let src = model.buffer(which);
    let (vw, vh) = (model.view_width, model.view_height);
    let (cw, chh) = (src.width, src.height);
    let channels = src.channels;
    let (cx, cy) = model.view_center();
    let (sin_a, cos_a) = pose.angle.sin_cos();

    let mut out = vec![0.0f64; vw * vh * channels];
    let mut taps = Vec::with_capacity(vw * vh);
    for y in 0..vh {
        for x in 0..vw {
            let vx = x as f64 - cx;
            let vy = y as f64 - cy;
            let wx = cos_a * vx - sin_a * vy + cx + pose.tx;
            let wy = sin_a * vx + cos_a * vy + cy + pose.ty;
            // Canvas coordinates, clamped to the edge.
            let sx = (wx - model.canvas_origin.0).clamp(0.0, (cw - 1) as f64);
            let sy = (wy - model.canvas_origin.1).clamp(0.0, (chh - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let y1 = (y0 + 1).min(chh - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let i00 = (y0 * cw + x0) as u32;
            let i10 = (y0 * cw + x1) as u32;
            let i01 = (y1 * cw + x0) as u32;
            let i11 = (y1 * cw + x1) as u32;
            taps.push([(i00, w00), (i10, w10), (i01, w01), (i11, w11)]);
            let o = (y * vw + x) * channels;
            for c in 0..channels {
                out[o + c] = w00 * src.data[i00 as usize * channels + c]
                    + w10 * src.data[i10 as usize * channels + c]
                    + w01 * src.data[i01 as usize * channels + c]
                    + w11 * src.data[i11 as usize * channels + c];
            }
        }
    }
    let image = ImageBuffer {
        width: vw,
        height: vh,
        channels,
        data: out,
    };
    let grad = RenderGrad {
        canvas_width: cw,
        canvas_height: chh,
        view_width: vw,
        view_height: vh,
        taps,
    };
    (image, grad)
}

/// Scatters an upstream view-space gradient back to canvas texels through the
/// recorded footprint. Deterministic: taps are visited in raster order.
pub fn backprop_render(grad_out: &ImageBuffer, grads: &RenderGrad) -> Result<ImageBuffer> {
    if grad_out.width != grads.view_width || grad_out.height != grads.view_height {
        return Err(EvdiError::shape(format!(
            "gradient {}x{} vs recorded view {}x{}",
            grad_out.width, grad_out.height, grads.view_width, grads.view_height
        )));
    }
    let channels = grad_out.channels;
    let mut acc = vec![0.0f64; grads.canvas_width * grads.canvas_height * channels];
    for y in 0..grads.view_height {
        for x in 0..grads.view_width {
            let o = (y * grads.view_width + x) * channels;
            for &(idx, w) in grads.taps(x, y) {
                let base = idx as usize * channels;
                for c in 0..channels {
                    acc[base + c] += w * grad_out.data[o + c];
                }
            }
        }
    }
    ImageBuffer::new(grads.canvas_width, grads.canvas_height, channels, acc)
}
