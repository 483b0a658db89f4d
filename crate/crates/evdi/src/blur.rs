//! Motion blur synthesis by averaging renders along a trajectory.
//!
//! A blurry exposure is modeled as the arithmetic mean, in linear intensity,
//! of the sharp frames seen along the camera path. `synth_blur` discretizes
//! the path at the trajectory's pose knots with a uniform unweighted average,
//! and records every per-pose sampling footprint so gradients of any loss on
//! the blurry estimate scatter back to canvas texels exactly.

use crate::core::{ImageBuffer, Trajectory};
use crate::error::{EvdiError, Result};
use crate::scene::{backprop_render, render, RenderGrad, RenderTarget, SceneModel};

/// Pixel-wise mean of equally shaped frames.
pub fn blur_average(frames: &[ImageBuffer]) -> Result<ImageBuffer> {
    let first = frames
        .first()
        .ok_or_else(|| EvdiError::shape("blur_average needs at least one frame"))?;
    let mut acc = ImageBuffer::zeros_like(first);
    for frame in frames {
        first.require_same_shape(frame, "blur_average frames")?;
        acc = acc.add_scaled(frame, 1.0)?;
    }
    Ok(acc.scaled(1.0 / frames.len() as f64))
}

/// Gradient path of one blur synthesis: the render footprints of every pose.
#[derive(Debug, Clone)]
pub struct BlurGrad {
    grads: Vec<RenderGrad>,
}

impl BlurGrad {
    pub fn n_poses(&self) -> usize {
        self.grads.len()
    }
}

/// Average of renders at every trajectory pose.
pub fn synth_blur(model: &SceneModel, traj: &Trajectory) -> (ImageBuffer, BlurGrad) {
    let n = traj.len();
    let mut grads = Vec::with_capacity(n);
    let mut acc: Option<ImageBuffer> = None;
    for pose in traj.poses() {
        let (img, g) = render(model, pose, RenderTarget::Color);
        grads.push(g);
        acc = Some(match acc {
            None => img,
            Some(a) => a.add_scaled(&img, 1.0).expect("render shapes agree"),
        });
    }
    let blur = acc.expect("trajectory has >= 2 poses").scaled(1.0 / n as f64);
    (blur, BlurGrad { grads })
}

/// Backprop through `synth_blur`: mean of the per-pose render scatters.
pub fn backprop_synth_blur(grad_out: &ImageBuffer, grads: &BlurGrad) -> Result<ImageBuffer> {
    let scale = 1.0 / grads.grads.len() as f64;
    let scaled = grad_out.scaled(scale);
    let mut acc: Option<ImageBuffer> = None;
    for g in &grads.grads {
        let back = backprop_render(&scaled, g)?;
        acc = Some(match acc {
            None => back,
            Some(a) => a.add_scaled(&back, 1.0)?,
        });
    }
    Ok(acc.expect("at least one pose"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{ExposureWindow, Pose2};
    use crate::gradcheck::central_diff;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_model(view: usize, pad: usize, seed: u64) -> SceneModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let size = view + 2 * pad;
        let mut model = SceneModel::new(view, view, pad, 3).unwrap();
        model.canvas =
            ImageBuffer::from_fn(size, size, 3, |_, _, _| rng.gen_range(0.05..0.95)).unwrap();
        model
    }

    fn sweep_traj(n: usize) -> Trajectory {
        let window = ExposureWindow::new(0.5, 1.0).unwrap();
        Trajectory::from_endpoints(
            "v0",
            window,
            Pose2::new(-0.04, -1.5, 0.8).unwrap(),
            Pose2::new(0.05, 1.5, -0.9).unwrap(),
            n,
        )
        .unwrap()
    }

    #[test]
    fn average_of_identical_frames_is_that_frame() {
        let f = ImageBuffer::filled(4, 3, 1, 0.37).unwrap();
        let avg = blur_average(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert!(avg.max_abs_diff(&f).unwrap() < 1e-15);
    }

    #[test]
    fn average_of_zero_and_one_is_half() {
        let a = ImageBuffer::zeros(2, 2, 1).unwrap();
        let b = ImageBuffer::filled(2, 2, 1, 1.0).unwrap();
        let avg = blur_average(&[a, b]).unwrap();
        assert!(avg.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn empty_frame_list_is_an_error() {
        assert!(blur_average(&[]).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImageBuffer::zeros(2, 2, 1).unwrap();
        let b = ImageBuffer::zeros(3, 2, 1).unwrap();
        assert!(blur_average(&[a, b]).is_err());
    }

    #[test]
    fn static_trajectory_equals_single_render() {
        let model = random_model(8, 4, 11);
        let window = ExposureWindow::new(0.0, 0.2).unwrap();
        let pose = Pose2::new(0.03, 0.7, -0.4).unwrap();
        let traj = Trajectory::from_endpoints("v", window, pose, pose, 5).unwrap();
        let (blur, _) = synth_blur(&model, &traj);
        let (single, _) = render(&model, &pose, RenderTarget::Color);
        assert!(blur.max_abs_diff(&single).unwrap() < 1e-12);
    }

    // A 9-pose average approaches the dense-path average; the gap is pure
    // trajectory discretization.
    #[test]
    fn coarse_average_tracks_dense_average() {
        let model = random_model(24, 8, 12);
        let coarse = sweep_traj(9);
        let dense = sweep_traj(1000);
        let (b9, _) = synth_blur(&model, &coarse);
        let (bd, _) = synth_blur(&model, &dense);
        let gap = b9.mean_abs_diff(&bd).unwrap();
        assert!(gap <= 2e-2, "discretization gap {gap}");
    }

    #[test]
    fn mean_preservation() {
        let model = random_model(10, 5, 13);
        let traj = sweep_traj(7);
        let (blur, _) = synth_blur(&model, &traj);
        let per_pose: f64 = traj
            .poses()
            .iter()
            .map(|p| render(&model, p, RenderTarget::Color).0.mean())
            .sum::<f64>()
            / traj.len() as f64;
        assert_relative_eq!(blur.mean(), per_pose, epsilon = 1e-12);
    }

    #[test]
    fn linearity_in_canvas() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let traj = sweep_traj(5);
        let a = random_model(8, 4, 15);
        let mut b = a.clone();
        b.canvas = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.gen_range(-0.3..0.3)).unwrap();
        let (alpha, beta) = (1.7, -0.4);
        let mut combo = a.clone();
        combo.canvas = a.canvas.scaled(alpha).add_scaled(&b.canvas, beta).unwrap();
        let (ba, _) = synth_blur(&a, &traj);
        let (bb, _) = synth_blur(&b, &traj);
        let (bc, _) = synth_blur(&combo, &traj);
        let expect = ba.scaled(alpha).add_scaled(&bb, beta).unwrap();
        assert!(bc.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let mut model = random_model(6, 3, 17);
        let traj = sweep_traj(4);
        let probe = ImageBuffer::from_fn(6, 6, 3, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let (_, grads) = synth_blur(&model, &traj);
        let analytic = backprop_synth_blur(&probe, &grads).unwrap();
        for _ in 0..50 {
            let i = rng.gen_range(0..model.canvas.data.len());
            let fd = central_diff(1e-4, model.canvas.data[i], |v| {
                let old = model.canvas.data[i];
                model.canvas.data[i] = v;
                let (blur, _) = synth_blur(&model, &traj);
                model.canvas.data[i] = old;
                blur.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
            });
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!((a - fd).abs() / denom <= 1e-5, "texel {i}: {a} vs {fd}");
        }
    }
}
