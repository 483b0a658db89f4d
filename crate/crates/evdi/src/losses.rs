//! Stage-1 objective terms and their exact gradients.
//!
//! Every sampled term has an `_at` variant taking the sample values
//! explicitly; the training loop draws one [`IterationSamples`] per step and
//! feeds the same draws to every term so a run can be replayed bit for bit.
//! All gradients here are assembled from the module-level backprop helpers
//! without algebraic shortcuts, so finite differences validate the whole
//! chain rather than a simplified rewrite of it.

use rand::Rng;

use crate::blur::{backprop_synth_blur, synth_blur, BlurGrad};
use crate::core::{ExposureWindow, ImageBuffer, RunConfig, Trajectory};
use crate::core::event::EventStream;
use crate::crf::{
    backprop_crf, backprop_log_brightness, backprop_luma, crf_apply, log_brightness, luma,
    CrfParams,
};
use crate::diffusion::{
    draw_rsd_noise, stage1_rsd_term, Denoiser, DiffusionSchedule, LatentCodec, RsdNoise,
};
use crate::edi::{edi_weights, warp_factors, WEIGHT_FLOOR};
use crate::error::{EvdiError, Result};
use crate::postprocess::ssim_with_grad;
use crate::scene::{backprop_render, render, RenderTarget, SceneModel};

/// Mixed L1 / structural-dissimilarity photometric distance:
/// `(1 - lambda1) * mean|a - b| + lambda1 * (1 - SSIM(a, b)) / 2`.
///
/// Returns the value and the gradients with respect to both images. With
/// `lambda1 == 0` the SSIM pass is skipped entirely, which also lifts the
/// minimum-size requirement of the Gaussian window.
pub fn photometric(
    a: &ImageBuffer,
    b: &ImageBuffer,
    lambda1: f64,
) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    a.require_same_shape(b, "photometric inputs")?;
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(EvdiError::domain(format!(
            "photometric mix weight must lie in [0, 1], got {lambda1}"
        )));
    }
    let n = a.data.len() as f64;
    let mut grad_a = a.zeros_like();
    let mut grad_b = b.zeros_like();
    let mut l1 = 0.0;
    let w1 = (1.0 - lambda1) / n;
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        l1 += d.abs();
        // Subgradient 0 at the kink so a perfect fit has an exactly zero grad.
        let s = w1 * sign0(d);
        grad_a.data[i] = s;
        grad_b.data[i] = -s;
    }
    let mut value = (1.0 - lambda1) * l1 / n;
    if lambda1 > 0.0 {
        let (s, gs_a, gs_b) = ssim_with_grad(a, b)?;
        value += lambda1 * (1.0 - s) / 2.0;
        let w = -lambda1 / 2.0;
        for i in 0..a.data.len() {
            grad_a.data[i] += w * gs_a.data[i];
            grad_b.data[i] += w * gs_b.data[i];
        }
    }
    Ok((value, grad_a, grad_b))
}

/// One blurry view with its event stream, trajectory and the cached
/// deblur maps the objective terms share.
///
/// `ratio[i]` is the per-pixel factor turning a blurry image into the frame
/// fitted at trajectory timestep `i`: warp(mid -> t_i) / max(W(mid), floor).
/// It depends only on the events, so it is computed once per view.
pub struct TrainView {
    pub gt_blur: ImageBuffer,
    pub stream: EventStream,
    pub traj: Trajectory,
    /// Ground-truth mid-exposure frame when the dataset ships one; only used
    /// for reporting, never for fitting.
    pub gt_mid: Option<ImageBuffer>,
    ratio: Vec<ImageBuffer>,
    /// Cached CRF-free color targets, one per trajectory timestep.
    color_targets: Vec<ImageBuffer>,
}

impl TrainView {
    pub fn new(
        gt_blur: ImageBuffer,
        stream: EventStream,
        traj: Trajectory,
        gt_mid: Option<ImageBuffer>,
        theta: f64,
    ) -> Result<Self> {
        if gt_blur.channels != 3 {
            return Err(EvdiError::shape(format!(
                "view {} blurry image must have 3 channels, got {}",
                traj.view_id, gt_blur.channels
            )));
        }
        let (w, h) = stream.resolution();
        if gt_blur.width != w || gt_blur.height != h {
            return Err(EvdiError::shape(format!(
                "view {}: blurry image is {}x{} but events are {}x{}",
                traj.view_id, gt_blur.width, gt_blur.height, w, h
            )));
        }
        let window = traj.window;
        let sw = stream.window();
        if (window.mid - sw.mid).abs() > 1e-9 || (window.tau - sw.tau).abs() > 1e-9 {
            return Err(EvdiError::domain(format!(
                "view {}: trajectory window [{}, {}] disagrees with event window [{}, {}]",
                traj.view_id,
                window.start(),
                window.end(),
                sw.start(),
                sw.end()
            )));
        }
        let weights = edi_weights(&stream, window, theta, window.mid)?;
        let mut ratio = Vec::with_capacity(traj.len());
        for &t in traj.timesteps() {
            let warp = warp_factors(&stream, theta, window.mid, t)?;
            let data: Vec<f64> = warp
                .iter()
                .zip(&weights.data)
                .map(|(&f, &wv)| f / wv.max(WEIGHT_FLOOR))
                .collect();
            ratio.push(ImageBuffer::new(w, h, 1, data)?);
        }
        let color_targets = ratio
            .iter()
            .map(|r| mul_broadcast(&gt_blur, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainView {
            gt_blur,
            stream,
            traj,
            gt_mid,
            ratio,
            color_targets,
        })
    }

    pub fn n_timesteps(&self) -> usize {
        self.traj.len()
    }

    /// Event-derived blur-to-frame factor at trajectory timestep `t_idx`.
    pub fn ratio(&self, t_idx: usize) -> &ImageBuffer {
        &self.ratio[t_idx]
    }

    pub fn color_target(&self, t_idx: usize) -> &ImageBuffer {
        &self.color_targets[t_idx]
    }
}

/// Sign with `sign0(0) == 0`, unlike `f64::signum` which maps +-0 to +-1.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Multiplies each channel of `img` by the single-channel `factor` map.
fn mul_broadcast(img: &ImageBuffer, factor: &ImageBuffer) -> Result<ImageBuffer> {
    if factor.channels != 1 || factor.width != img.width || factor.height != img.height {
        return Err(EvdiError::shape("broadcast factor must be 1-channel, same size"));
    }
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v *= factor.data[i / img.channels];
    }
    Ok(out)
}

/// Blur reconstruction: photometric distance between the trajectory-averaged
/// render and the captured blurry image. Returns the canvas gradient.
pub fn loss_blur(
    model: &SceneModel,
    traj: &Trajectory,
    gt_blur: &ImageBuffer,
    lambda1: f64,
) -> Result<(f64, ImageBuffer)> {
    let (synth, sgrad) = synth_blur(model, traj);
    loss_blur_precomputed(&synth, &sgrad, gt_blur, lambda1)
}

/// Same as [`loss_blur`] but reusing an already-synthesized blur so one
/// render sweep can feed several terms.
pub fn loss_blur_precomputed(
    synth: &ImageBuffer,
    sgrad: &BlurGrad,
    gt_blur: &ImageBuffer,
    lambda1: f64,
) -> Result<(f64, ImageBuffer)> {
    let (value, _, grad_synth) = photometric(gt_blur, synth, lambda1)?;
    let grad_canvas = backprop_synth_blur(&grad_synth, sgrad)?;
    Ok((value, grad_canvas))
}

/// Per-term gradient bundle: canvas plus raw CRF parameters.
pub struct TermGrad {
    pub value: f64,
    pub grad_canvas: ImageBuffer,
    pub grad_crf: Vec<f64>,
}

fn add_scaled_in_place(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

/// Event supervision at an explicit time pair: the mean squared gap between
/// the model's log-brightness change over `(t_alpha, t_beta)` and the
/// threshold-scaled signed event count.
pub fn loss_ev_at(
    model: &SceneModel,
    crf: &CrfParams,
    traj: &Trajectory,
    stream: &EventStream,
    theta: f64,
    eps_floor: f64,
    t_alpha: f64,
    t_beta: f64,
) -> Result<TermGrad> {
    let pose_a = traj.pose_at(t_alpha)?;
    let pose_b = traj.pose_at(t_beta)?;
    let (img_a, rg_a) = render(model, &pose_a, RenderTarget::Color);
    let (img_b, rg_b) = render(model, &pose_b, RenderTarget::Color);
    let (log_a, lg_a) = log_brightness(crf, &img_a, eps_floor)?;
    let (log_b, lg_b) = log_brightness(crf, &img_b, eps_floor)?;
    let (w, h) = stream.resolution();
    if log_a.width != w || log_a.height != h {
        return Err(EvdiError::shape("event loss: render and stream resolution differ"));
    }
    let n = (w * h) as f64;
    let mut value = 0.0;
    let mut grad_log_b = log_b.zeros_like();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let observed = theta * stream.signed_count(x, y, t_alpha, t_beta)? as f64;
            let r = (log_b.data[i] - log_a.data[i]) - observed;
            value += r * r;
            grad_log_b.data[i] = 2.0 * r / n;
        }
    }
    value /= n;
    let grad_log_a = grad_log_b.scaled(-1.0);
    let (gi_b, gp_b) = backprop_log_brightness(&grad_log_b, &lg_b)?;
    let (gi_a, gp_a) = backprop_log_brightness(&grad_log_a, &lg_a)?;
    let mut grad_canvas = backprop_render(&gi_b, &rg_b)?;
    let ga = backprop_render(&gi_a, &rg_a)?;
    for (acc, v) in grad_canvas.data.iter_mut().zip(&ga.data) {
        *acc += v;
    }
    let mut grad_crf = gp_b;
    add_scaled_in_place(&mut grad_crf, &gp_a, 1.0);
    Ok(TermGrad {
        value,
        grad_canvas,
        grad_crf,
    })
}

/// Grayscale deblur consistency at trajectory timestep `t_idx`: the CRF-mapped
/// luma render must match the event-propagated blurry luma. `target_grad`
/// selects whether the target construction is differentiated or held constant.
pub fn loss_edi_gray_at(
    model: &SceneModel,
    crf: &CrfParams,
    view: &TrainView,
    t_idx: usize,
    lambda1: f64,
    target_grad: bool,
) -> Result<TermGrad> {
    let pose = view.traj.poses()[t_idx];
    let (img, rg) = render(model, &pose, RenderTarget::Color);
    let (mapped_pred, cg_pred) = crf_apply(crf, &img);
    let pred = luma(&mapped_pred)?;

    let (mapped_blur, cg_blur) = crf_apply(crf, &view.gt_blur);
    let blur_luma = luma(&mapped_blur)?;
    let ratio = view.ratio(t_idx);
    let target = mul_broadcast(&blur_luma, ratio)?;

    let (value, grad_target, grad_pred) = photometric(&target, &pred, lambda1)?;

    let gl_pred = backprop_luma(&grad_pred)?;
    let (gi_pred, gp_pred) = backprop_crf(&gl_pred, &cg_pred)?;
    let grad_canvas = backprop_render(&gi_pred, &rg)?;
    let mut grad_crf = gp_pred;
    if target_grad {
        let grad_blur_luma = mul_broadcast(&grad_target, ratio)?;
        let gl_blur = backprop_luma(&grad_blur_luma)?;
        let (_, gp_blur) = backprop_crf(&gl_blur, &cg_blur)?;
        add_scaled_in_place(&mut grad_crf, &gp_blur, 1.0);
    }
    Ok(TermGrad {
        value,
        grad_canvas,
        grad_crf,
    })
}

/// Color deblur consistency at timestep `t_idx`. The target is CRF-free and
/// cached in the view, so only the canvas receives a gradient.
pub fn loss_edi_color_at(
    model: &SceneModel,
    view: &TrainView,
    t_idx: usize,
    lambda1: f64,
) -> Result<(f64, ImageBuffer)> {
    let pose = view.traj.poses()[t_idx];
    let (img, rg) = render(model, &pose, RenderTarget::Color);
    let (value, _, grad_pred) = photometric(view.color_target(t_idx), &img, lambda1)?;
    let grad_canvas = backprop_render(&grad_pred, &rg)?;
    Ok((value, grad_canvas))
}

/// Simulation-consistent deblur at timestep `t_idx`: like the grayscale term
/// but the target is propagated from the model's own synthesized blur, so the
/// gradient couples the rendered frame and the blur average. `synth`/`sgrad`
/// come from one shared [`synth_blur`] call per step.
pub fn loss_edi_simul_at(
    model: &SceneModel,
    crf: &CrfParams,
    view: &TrainView,
    synth: &ImageBuffer,
    sgrad: &BlurGrad,
    t_idx: usize,
    lambda1: f64,
    target_grad: bool,
) -> Result<TermGrad> {
    let pose = view.traj.poses()[t_idx];
    let (img, rg) = render(model, &pose, RenderTarget::Color);
    let (mapped_pred, cg_pred) = crf_apply(crf, &img);
    let pred = luma(&mapped_pred)?;

    let (mapped_synth, cg_synth) = crf_apply(crf, synth);
    let synth_luma = luma(&mapped_synth)?;
    let ratio = view.ratio(t_idx);
    let target = mul_broadcast(&synth_luma, ratio)?;

    let (value, grad_target, grad_pred) = photometric(&target, &pred, lambda1)?;

    let gl_pred = backprop_luma(&grad_pred)?;
    let (gi_pred, gp_pred) = backprop_crf(&gl_pred, &cg_pred)?;
    let mut grad_canvas = backprop_render(&gi_pred, &rg)?;
    let mut grad_crf = gp_pred;
    if target_grad {
        let grad_synth_luma = mul_broadcast(&grad_target, ratio)?;
        let gl_synth = backprop_luma(&grad_synth_luma)?;
        let (gi_synth, gp_synth) = backprop_crf(&gl_synth, &cg_synth)?;
        let gc = backprop_synth_blur(&gi_synth, sgrad)?;
        for (acc, v) in grad_canvas.data.iter_mut().zip(&gc.data) {
            *acc += v;
        }
        add_scaled_in_place(&mut grad_crf, &gp_synth, 1.0);
    }
    Ok(TermGrad {
        value,
        grad_canvas,
        grad_crf,
    })
}

/// Which optional terms are live at the current iteration.
#[derive(Debug, Clone, Copy)]
pub struct StageGates {
    /// CRF parameters receive gradients once this is set.
    pub crf_active: bool,
    /// The simulation-consistent deblur term is evaluated once this is set.
    pub simul_active: bool,
}

/// All random draws of one training step, recorded so the step is replayable.
#[derive(Debug, Clone)]
pub struct IterationSamples {
    /// Trajectory timestep index shared by the deblur-consistency terms.
    pub t_idx: usize,
    pub t_alpha: f64,
    pub t_beta: f64,
    pub rsd_t: usize,
    pub rsd_noise: Option<RsdNoise>,
}

/// Draws one step's samples. The diffusion noise is only drawn when the
/// denoising term carries weight, keeping the RNG stream identical between
/// runs that share a configuration.
pub fn draw_samples<R: Rng>(
    rng: &mut R,
    view: &TrainView,
    cfg: &RunConfig,
    codec: Option<&dyn LatentCodec>,
) -> Result<IterationSamples> {
    let window: ExposureWindow = view.traj.window;
    let t_idx = rng.gen_range(0..view.n_timesteps());
    let t_alpha = rng.gen_range(window.start()..window.end());
    // (0, tau/2]: flip the half-open unit draw so zero is excluded.
    let dt = (1.0 - rng.gen::<f64>()) * window.tau / 2.0;
    let t_beta = (t_alpha + dt).min(window.end());
    let rsd_t = rng.gen_range(cfg.rsd_t_min..=cfg.rsd_t_max);
    let rsd_noise = match codec {
        Some(c) if cfg.lambda_rsd > 0.0 => {
            let (lw, lh) = c.latent_dims(view.gt_blur.width, view.gt_blur.height);
            let like = ImageBuffer::zeros(lw, lh, 3)?;
            Some(draw_rsd_noise(rng, &like, cfg.coupled_noise))
        }
        _ => None,
    };
    Ok(IterationSamples {
        t_idx,
        t_alpha,
        t_beta,
        rsd_t,
        rsd_noise,
    })
}

/// Per-term values and the accumulated gradients of one stage-1 step.
pub struct LossReport {
    pub blur: f64,
    pub ev: f64,
    pub edi_gray: f64,
    pub edi_color: f64,
    pub edi_simul: f64,
    pub rsd: f64,
    pub total: f64,
    pub grad_canvas: ImageBuffer,
    pub grad_crf: Vec<f64>,
}

impl LossReport {
    /// `(name, value)` pairs in the order they are logged.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("blur", self.blur),
            ("ev", self.ev),
            ("edi_gray", self.edi_gray),
            ("edi_color", self.edi_color),
            ("edi_simul", self.edi_simul),
            ("rsd", self.rsd),
            ("total", self.total),
        ]
    }
}

/// Full stage-1 objective on one view at fixed samples:
/// `lambda_blur * L_blur + lambda_ev * L_ev + lambda_edi * (gray + color + simul)
///  + lambda_rsd * L_rsd`.
///
/// One `synth_blur` sweep feeds the blur, simulation and denoising terms.
/// When `gates.crf_active` is unset the CRF gradient is zeroed; when
/// `gates.simul_active` is unset that term is skipped and reported as zero.
#[allow(clippy::too_many_arguments)]
pub fn loss_stage1(
    model: &SceneModel,
    crf: &CrfParams,
    view: &TrainView,
    cfg: &RunConfig,
    gates: StageGates,
    samples: &IterationSamples,
    diffusion: Option<(&DiffusionSchedule, &dyn Denoiser, &dyn LatentCodec)>,
) -> Result<LossReport> {
    let lambda1 = cfg.lambda_dssim;
    let needs_synth = cfg.lambda_blur > 0.0
        || cfg.lambda_rsd > 0.0
        || (cfg.lambda_edi > 0.0 && gates.simul_active);
    let synth = if needs_synth {
        Some(synth_blur(model, &view.traj))
    } else {
        None
    };

    let mut grad_canvas = model.canvas.zeros_like();
    let mut grad_crf = vec![0.0f64; crf.raw().len()];
    let mut report = LossReport {
        blur: 0.0,
        ev: 0.0,
        edi_gray: 0.0,
        edi_color: 0.0,
        edi_simul: 0.0,
        rsd: 0.0,
        total: 0.0,
        grad_canvas: model.canvas.zeros_like(),
        grad_crf: Vec::new(),
    };

    if cfg.lambda_blur > 0.0 {
        let (synth_img, sgrad) = synth.as_ref().unwrap();
        let (v, g) = loss_blur_precomputed(synth_img, sgrad, &view.gt_blur, lambda1)?;
        report.blur = v;
        add_scaled_in_place(&mut grad_canvas.data, &g.data, cfg.lambda_blur);
    }

    if cfg.lambda_ev > 0.0 {
        let tg = loss_ev_at(
            model,
            crf,
            &view.traj,
            &view.stream,
            cfg.theta,
            cfg.eps_floor,
            samples.t_alpha,
            samples.t_beta,
        )?;
        report.ev = tg.value;
        add_scaled_in_place(&mut grad_canvas.data, &tg.grad_canvas.data, cfg.lambda_ev);
        add_scaled_in_place(&mut grad_crf, &tg.grad_crf, cfg.lambda_ev);
    }

    if cfg.lambda_edi > 0.0 {
        let tg = loss_edi_gray_at(model, crf, view, samples.t_idx, lambda1, cfg.crf_target_grad)?;
        report.edi_gray = tg.value;
        add_scaled_in_place(&mut grad_canvas.data, &tg.grad_canvas.data, cfg.lambda_edi);
        add_scaled_in_place(&mut grad_crf, &tg.grad_crf, cfg.lambda_edi);

        let (v, g) = loss_edi_color_at(model, view, samples.t_idx, lambda1)?;
        report.edi_color = v;
        add_scaled_in_place(&mut grad_canvas.data, &g.data, cfg.lambda_edi);

        if gates.simul_active {
            let (synth_img, sgrad) = synth.as_ref().unwrap();
            let tg = loss_edi_simul_at(
                model,
                crf,
                view,
                synth_img,
                sgrad,
                samples.t_idx,
                lambda1,
                cfg.crf_target_grad,
            )?;
            report.edi_simul = tg.value;
            add_scaled_in_place(&mut grad_canvas.data, &tg.grad_canvas.data, cfg.lambda_edi);
            add_scaled_in_place(&mut grad_crf, &tg.grad_crf, cfg.lambda_edi);
        }
    }

    if cfg.lambda_rsd > 0.0 {
        let (schedule, denoiser, codec) = diffusion.ok_or_else(|| {
            EvdiError::domain("denoising weight is positive but no diffusion setup was provided")
        })?;
        let noise = samples.rsd_noise.as_ref().ok_or_else(|| {
            EvdiError::domain("denoising weight is positive but the step carries no noise draw")
        })?;
        let (synth_img, sgrad) = synth.as_ref().unwrap();
        let (v, g) = stage1_rsd_term(
            synth_img,
            sgrad,
            &view.gt_blur,
            codec,
            denoiser,
            schedule,
            samples.rsd_t,
            noise,
        )?;
        report.rsd = v;
        add_scaled_in_place(&mut grad_canvas.data, &g.data, cfg.lambda_rsd);
    }

    if !gates.crf_active {
        grad_crf.iter_mut().for_each(|g| *g = 0.0);
    }

    report.total = cfg.lambda_blur * report.blur
        + cfg.lambda_ev * report.ev
        + cfg.lambda_edi * (report.edi_gray + report.edi_color + report.edi_simul)
        + cfg.lambda_rsd * report.rsd;
    report.grad_canvas = grad_canvas;
    report.grad_crf = grad_crf;
    Ok(report)
}
