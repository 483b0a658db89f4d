//! DDPM machinery and the renoised score-distillation objective.
//!
//! A `DiffusionSchedule` holds the usual beta/alpha/alpha-bar/sigma tables
//! (alpha_bar is indexed 0..=T with alpha_bar[0] = 1). `rsd_loss` compares a
//! directly forward-noised latent at step t-1 against the one-step denoised
//! latent obtained from step t, under pluggable `Denoiser` and `LatentCodec`
//! implementations.
//!
//! Denoisers are black boxes by default: the loss gradient treats eps_hat as
//! constant unless the denoiser overrides `denoise_vjp` with its true
//! Jacobian-transpose product. The shipped shrinkage denoiser is analytic and
//! does so exactly, which keeps every finite-difference check honest. Note
//! that for a denoiser whose output ignores z_t the two branches of the loss
//! cancel exactly and the z0 gradient is identically zero; the vjp term is
//! what makes the objective informative.

use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Mutex;

use crate::blur::{backprop_synth_blur, BlurGrad};
use crate::core::{ImageBuffer, Pose2};
use crate::error::{EvdiError, Result};
use crate::scene::{backprop_render, render, RenderTarget, SceneModel};

/// Beta/alpha tables of a linear-beta DDPM.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(EvdiError::config("diffusion schedule needs >= 1 step"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(EvdiError::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} / {beta_end}"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            let u = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            beta[t] = beta_start + (beta_end - beta_start) * u;
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            // Posterior standard deviation of the reverse kernel.
            sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
        }
        Ok(DiffusionSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(EvdiError::domain(format!(
                "timestep {t} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative product of alpha; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sigma\n");
        for t in 0..=self.steps() {
            out.push_str(&format!(
                "{t},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                self.beta[t], self.alpha[t], self.alpha_bar[t], self.sigma[t]
            ));
        }
        out
    }
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Accepts t = 0 (the
/// identity row).
pub fn forward_noise(
    schedule: &DiffusionSchedule,
    z0: &ImageBuffer,
    t: usize,
    eps: &ImageBuffer,
) -> Result<ImageBuffer> {
    schedule.check_step(t, 0)?;
    z0.require_same_shape(eps, "forward_noise z0/eps")?;
    let ab = schedule.alpha_bar(t);
    Ok(z0.scaled(ab.sqrt())
        .add_scaled(eps, (1.0 - ab).sqrt())
        .expect("shapes checked"))
}

/// z_{t-1} = (z_t - (1-alpha_t)/sqrt(1-alpha_bar_t) eps_hat)/sqrt(alpha_t)
/// plus sigma_t * noise when noise is supplied.
pub fn reverse_step(
    schedule: &DiffusionSchedule,
    z_t: &ImageBuffer,
    eps_hat: &ImageBuffer,
    t: usize,
    noise: Option<&ImageBuffer>,
) -> Result<ImageBuffer> {
    schedule.check_step(t, 1)?;
    z_t.require_same_shape(eps_hat, "reverse_step z_t/eps_hat")?;
    let a = schedule.alpha(t);
    let c = (1.0 - a) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut out = z_t
        .add_scaled(eps_hat, -c)
        .expect("shapes checked")
        .scaled(1.0 / a.sqrt());
    if let Some(n) = noise {
        z_t.require_same_shape(n, "reverse_step noise")?;
        out = out.add_scaled(n, schedule.sigma(t))?;
    }
    Ok(out)
}

/// Noise-prediction model interface. Implementations must be pure given
/// (z_t, y, t) and safe to call concurrently.
pub trait Denoiser: Sync {
    fn denoise(
        &self,
        z_t: &ImageBuffer,
        y: &ImageBuffer,
        t: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<ImageBuffer>;

    /// Jacobian-transpose product d(eps_hat)/d(z_t)^T applied to an upstream
    /// gradient. The default treats the denoiser as a black box (zero), which
    /// is exact for denoisers whose output does not depend on z_t.
    fn denoise_vjp(
        &self,
        grad_eps_hat: &ImageBuffer,
        _z_t: &ImageBuffer,
        _y: &ImageBuffer,
        _t: usize,
        _schedule: &DiffusionSchedule,
    ) -> Result<ImageBuffer> {
        Ok(grad_eps_hat.zeros_like())
    }

    /// Diagnostic hook: the loss reports the noise it actually drew before
    /// asking for a prediction. Only test denoisers use this.
    fn observe_true_eps(&self, _eps: &ImageBuffer) {}
}

/// Predicts zero noise everywhere.
#[derive(Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn denoise(
        &self,
        z_t: &ImageBuffer,
        _y: &ImageBuffer,
        _t: usize,
        _schedule: &DiffusionSchedule,
    ) -> Result<ImageBuffer> {
        Ok(z_t.zeros_like())
    }
}

/// Replays the exact noise used by the forward process; a perfect denoiser
/// for tests and calibration runs.
#[derive(Debug, Default)]
pub struct OracleDenoiser {
    eps: Mutex<Option<ImageBuffer>>,
}

impl OracleDenoiser {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(
        &self,
        z_t: &ImageBuffer,
        _y: &ImageBuffer,
        _t: usize,
        _schedule: &DiffusionSchedule,
    ) -> Result<ImageBuffer> {
        let guard = self.eps.lock().expect("oracle lock");
        let eps = guard
            .as_ref()
            .ok_or_else(|| EvdiError::domain("oracle denoiser has not observed a noise draw"))?;
        z_t.require_same_shape(eps, "oracle eps/z_t")?;
        Ok(eps.clone())
    }

    fn observe_true_eps(&self, eps: &ImageBuffer) {
        *self.eps.lock().expect("oracle lock") = Some(eps.clone());
    }
}

fn box_blur(img: &ImageBuffer, radius: usize) -> ImageBuffer {
    let r = radius as isize;
    let area = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    ImageBuffer::from_fn(img.width, img.height, img.channels, |x, y, c| {
        let mut s = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as isize + dx).clamp(0, img.width as isize - 1) as usize;
                let sy = (y as isize + dy).clamp(0, img.height as isize - 1) as usize;
                s += img.get(sx, sy, c);
            }
        }
        s / area
    })
    .expect("shape preserved")
}

/// Analytic prior: eps_hat = (z_t - sqrt(alpha_bar_t) * boxblur(y)) /
/// sqrt(1 - alpha_bar_t), i.e. the exact noise if the clean latent were the
/// blurred conditioning image. Its z_t Jacobian is diagonal, so the vjp is
/// exact.
#[derive(Debug)]
pub struct ShrinkageDenoiser {
    pub blur_radius: usize,
}

impl Denoiser for ShrinkageDenoiser {
    fn denoise(
        &self,
        z_t: &ImageBuffer,
        y: &ImageBuffer,
        t: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<ImageBuffer> {
        z_t.require_same_shape(y, "shrinkage z_t/y")?;
        let ab = schedule.alpha_bar(t);
        let anchor = box_blur(y, self.blur_radius);
        Ok(z_t
            .add_scaled(&anchor, -ab.sqrt())?
            .scaled(1.0 / (1.0 - ab).sqrt()))
    }

    fn denoise_vjp(
        &self,
        grad_eps_hat: &ImageBuffer,
        _z_t: &ImageBuffer,
        _y: &ImageBuffer,
        t: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<ImageBuffer> {
        let ab = schedule.alpha_bar(t);
        Ok(grad_eps_hat.scaled(1.0 / (1.0 - ab).sqrt()))
    }
}

/// Image <-> latent mapping around the diffusion losses.
pub trait LatentCodec: Sync {
    fn encode(&self, img: &ImageBuffer) -> Result<ImageBuffer>;
    fn decode(&self, latent: &ImageBuffer) -> Result<ImageBuffer>;
    /// Adjoint of `encode` for gradient routing back to image space.
    fn backprop_encode(
        &self,
        grad_latent: &ImageBuffer,
        width: usize,
        height: usize,
    ) -> Result<ImageBuffer>;
    /// Latent resolution for a given image resolution.
    fn latent_dims(&self, width: usize, height: usize) -> (usize, usize);
}

#[derive(Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(img.clone())
    }

    fn decode(&self, latent: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(latent.clone())
    }

    fn backprop_encode(
        &self,
        grad_latent: &ImageBuffer,
        width: usize,
        height: usize,
    ) -> Result<ImageBuffer> {
        if grad_latent.width != width || grad_latent.height != height {
            return Err(EvdiError::shape("identity codec gradient shape mismatch"));
        }
        Ok(grad_latent.clone())
    }

    fn latent_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width, height)
    }
}

/// Mean-pools `factor` x `factor` blocks on encode and upsamples bilinearly
/// on decode. Mimics a latent-space downscale without pretrained weights.
#[derive(Debug)]
pub struct AvgPoolCodec {
    pub factor: usize,
}

impl Default for AvgPoolCodec {
    fn default() -> Self {
        AvgPoolCodec { factor: 4 }
    }
}

impl LatentCodec for AvgPoolCodec {
    fn encode(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let f = self.factor;
        if f == 0 || img.width % f != 0 || img.height % f != 0 {
            return Err(EvdiError::shape(format!(
                "avgpool codec needs dims divisible by {f}, got {}x{}",
                img.width, img.height
            )));
        }
        let area = (f * f) as f64;
        ImageBuffer::from_fn(img.width / f, img.height / f, img.channels, |x, y, c| {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += img.get(x * f + dx, y * f + dy, c);
                }
            }
            s / area
        })
    }

    fn decode(&self, latent: &ImageBuffer) -> Result<ImageBuffer> {
        let f = self.factor;
        ImageBuffer::from_fn(latent.width * f, latent.height * f, latent.channels, |x, y, c| {
            let u = ((x as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, latent.width as f64 - 1.0);
            let v = ((y as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, latent.height as f64 - 1.0);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(latent.width - 1), (y0 + 1).min(latent.height - 1));
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            (1.0 - fx) * (1.0 - fy) * latent.get(x0, y0, c)
                + fx * (1.0 - fy) * latent.get(x1, y0, c)
                + (1.0 - fx) * fy * latent.get(x0, y1, c)
                + fx * fy * latent.get(x1, y1, c)
        })
    }

    fn backprop_encode(
        &self,
        grad_latent: &ImageBuffer,
        width: usize,
        height: usize,
    ) -> Result<ImageBuffer> {
        let f = self.factor;
        if grad_latent.width * f != width || grad_latent.height * f != height {
            return Err(EvdiError::shape("avgpool codec gradient shape mismatch"));
        }
        let inv_area = 1.0 / (f * f) as f64;
        ImageBuffer::from_fn(width, height, grad_latent.channels, |x, y, c| {
            grad_latent.get(x / f, y / f, c) * inv_area
        })
    }

    fn latent_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width / self.factor, height / self.factor)
    }
}

/// The two independent unit-normal draws of one loss evaluation.
#[derive(Debug, Clone)]
pub struct RsdNoise {
    pub eps: ImageBuffer,
    pub eps_prime: ImageBuffer,
}

/// Draws (eps, eps_prime) shaped like a latent; `coupled` reuses eps for both.
pub fn draw_rsd_noise<R: Rng>(rng: &mut R, like: &ImageBuffer, coupled: bool) -> RsdNoise {
    let mut draw = || {
        let data: Vec<f64> = (0..like.data.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        ImageBuffer {
            width: like.width,
            height: like.height,
            channels: like.channels,
            data,
        }
    };
    let eps = draw();
    let eps_prime = if coupled { eps.clone() } else { draw() };
    RsdNoise { eps, eps_prime }
}

/// Mean absolute difference between the forward-noised latent at t-1 and the
/// one-step denoised latent from t, with the z0 gradient. Deterministic given
/// the supplied noise.
pub fn rsd_loss_with_noise(
    schedule: &DiffusionSchedule,
    z0: &ImageBuffer,
    t: usize,
    denoiser: &dyn Denoiser,
    y: &ImageBuffer,
    noise: &RsdNoise,
) -> Result<(f64, ImageBuffer)> {
    schedule.check_step(t, 1)?;
    z0.require_same_shape(&noise.eps, "rsd z0/eps")?;
    z0.require_same_shape(&noise.eps_prime, "rsd z0/eps_prime")?;
    let z_t = forward_noise(schedule, z0, t, &noise.eps)?;
    let z_prev = forward_noise(schedule, z0, t - 1, &noise.eps_prime)?;
    denoiser.observe_true_eps(&noise.eps);
    let eps_hat = denoiser.denoise(&z_t, y, t, schedule)?;
    let z_prev_hat = reverse_step(schedule, &z_t, &eps_hat, t, None)?;

    let n = z0.data.len() as f64;
    let mut loss = 0.0;
    let mut s = z0.zeros_like();
    for (i, (&a, &b)) in z_prev.data.iter().zip(&z_prev_hat.data).enumerate() {
        let d = a - b;
        loss += d.abs();
        // Subgradient 0 at the kink: a perfect match must yield a zero grad.
        let sg = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        s.data[i] = sg / n;
    }
    loss /= n;

    // d z_prev / d z0 = sqrt(alpha_bar_{t-1}); d z_prev_hat / d z0 flows
    // through z_t both directly and through the denoiser's vjp.
    let a_t = schedule.alpha(t);
    let c_t = (1.0 - a_t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let grad_eps_hat = s.scaled(c_t / a_t.sqrt());
    let vjp = denoiser.denoise_vjp(&grad_eps_hat, &z_t, y, t, schedule)?;
    let grad_z_t = s.scaled(-1.0 / a_t.sqrt()).add_scaled(&vjp, 1.0)?;
    let grad_z0 = s
        .scaled(schedule.alpha_bar(t - 1).sqrt())
        .add_scaled(&grad_z_t, schedule.alpha_bar(t).sqrt())?;
    Ok((loss, grad_z0))
}

/// `rsd_loss_with_noise` with the noise drawn from `rng`.
pub fn rsd_loss<R: Rng>(
    schedule: &DiffusionSchedule,
    z0: &ImageBuffer,
    t: usize,
    denoiser: &dyn Denoiser,
    y: &ImageBuffer,
    rng: &mut R,
    coupled: bool,
) -> Result<(f64, ImageBuffer)> {
    let noise = draw_rsd_noise(rng, z0, coupled);
    rsd_loss_with_noise(schedule, z0, t, denoiser, y, &noise)
}

/// Stage-1 diffusion term: the loss on the encoded blur estimate,
/// conditioned on the encoded ground-truth blurry image, with its gradient
/// routed through the blur-synthesis footprint back to the canvas.
#[allow(clippy::too_many_arguments)]
pub fn stage1_rsd_term(
    synth: &ImageBuffer,
    synth_grad: &BlurGrad,
    gt_blur: &ImageBuffer,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    t: usize,
    noise: &RsdNoise,
) -> Result<(f64, ImageBuffer)> {
    synth.require_same_shape(gt_blur, "rsd synth/gt blur")?;
    let z0 = codec.encode(synth)?;
    let y = codec.encode(gt_blur)?;
    let (loss, grad_z0) = rsd_loss_with_noise(schedule, &z0, t, denoiser, &y, noise)?;
    let grad_img = codec.backprop_encode(&grad_z0, synth.width, synth.height)?;
    let grad_canvas = backprop_synth_blur(&grad_img, synth_grad)?;
    Ok((loss, grad_canvas))
}

/// One Stage-2 refinement step at a pose: the loss on encode(render) plus the
/// encoded rendered residual features, conditioned on the render itself.
/// Returns the gradient for the residual canvas only; color canvas and
/// response curve are never touched.
pub fn stage2_step(
    model: &SceneModel,
    pose: &Pose2,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    t: usize,
    noise: &RsdNoise,
) -> Result<(f64, ImageBuffer)> {
    let (c_img, _) = render(model, pose, RenderTarget::Color);
    let (f2d, fgrad) = render(model, pose, RenderTarget::Residual);
    let zc = codec.encode(&c_img)?;
    let f_lat = codec.encode(&f2d)?;
    zc.require_same_shape(&f_lat, "stage2 latent/feature")?;
    let z0 = zc.add_scaled(&f_lat, 1.0)?;
    let (loss, grad_z0) = rsd_loss_with_noise(schedule, &z0, t, denoiser, &zc, noise)?;
    let grad_f2d = codec.backprop_encode(&grad_z0, f2d.width, f2d.height)?;
    let grad_residual = backprop_render(&grad_f2d, &fgrad)?;
    Ok((loss, grad_residual))
}

/// Refined view: decode(encode(render) + encoded rendered residual).
pub fn refine_render(
    model: &SceneModel,
    pose: &Pose2,
    codec: &dyn LatentCodec,
) -> Result<ImageBuffer> {
    let (c_img, _) = render(model, pose, RenderTarget::Color);
    let (f2d, _) = render(model, pose, RenderTarget::Residual);
    let zc = codec.encode(&c_img)?;
    let f_lat = codec.encode(&f2d)?;
    zc.require_same_shape(&f_lat, "refine latent/feature")?;
    codec.decode(&zc.add_scaled(&f_lat, 1.0)?)
}

/// Linearly decreasing refinement timestep, clamped into [1, steps].
pub fn stage2_timestep(iter: usize, total: usize, t_max: usize, t_min: usize, steps: usize) -> usize {
    let u = if total == 0 {
        0.0
    } else {
        iter as f64 / total as f64
    };
    let t = (t_max as f64 + (t_min as f64 - t_max as f64) * u).round() as i64;
    t.clamp(1, steps as i64) as usize
}
