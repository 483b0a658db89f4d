//! Training loops, optimizer state and checkpointing.
//!
//! Both stages run single-threaded over one ChaCha12 stream whose position is
//! part of the saved state, so an interrupted run resumed from `state.bin`
//! reproduces the uninterrupted run bit for bit. Checkpoints additionally
//! dump the canvas and residual as PFM and the response curve as CSV for
//! inspection; those are derived artifacts, `state.bin` alone restores
//! training.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::core::{ImageBuffer, RunConfig};
use crate::crf::CrfParams;
use crate::diffusion::{
    draw_rsd_noise, stage2_step, stage2_timestep, Denoiser, DiffusionSchedule, LatentCodec,
};
use crate::edi::{edi_deblur_color, edi_weights};
use crate::error::{EvdiError, Result};
use crate::io::save_pfm;
use crate::losses::{draw_samples, loss_stage1, IterationSamples, LossReport, StageGates, TrainView};
use crate::scene::SceneModel;

const STATE_MAGIC: &[u8; 8] = b"EVDITRN\0";
const STATE_VERSION: u32 = 1;

/// Adam with bias correction; the step counter is part of the state so a
/// resumed optimizer continues the same moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// The training views of one run.
pub struct Dataset {
    pub views: Vec<TrainView>,
}

impl Dataset {
    pub fn new(views: Vec<TrainView>) -> Result<Self> {
        if views.is_empty() {
            return Err(EvdiError::domain("dataset needs at least one view"));
        }
        let (w, h) = (views[0].gt_blur.width, views[0].gt_blur.height);
        for v in &views {
            if v.gt_blur.width != w || v.gt_blur.height != h {
                return Err(EvdiError::shape(format!(
                    "view {} is {}x{}, expected {w}x{h}",
                    v.traj.view_id, v.gt_blur.width, v.gt_blur.height
                )));
            }
        }
        Ok(Dataset { views })
    }

    pub fn view_size(&self) -> (usize, usize) {
        (self.views[0].gt_blur.width, self.views[0].gt_blur.height)
    }
}

/// Smallest padding that keeps every trajectory pose's view footprint on the
/// canvas, plus two pixels of bilinear slack.
pub fn auto_padding(dataset: &Dataset) -> usize {
    let (w, h) = dataset.view_size();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let corners = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (0.0, h as f64 - 1.0),
        (w as f64 - 1.0, h as f64 - 1.0),
    ];
    let mut max_disp = 0.0f64;
    for view in &dataset.views {
        for pose in view.traj.poses() {
            let (s, c) = pose.angle.sin_cos();
            for &(px, py) in &corners {
                let dx = px - cx;
                let dy = py - cy;
                let wx = c * dx - s * dy + cx + pose.tx;
                let wy = s * dx + c * dy + cy + pose.ty;
                max_disp = max_disp.max((wx - px).abs()).max((wy - py).abs());
            }
        }
    }
    max_disp.ceil() as usize + 2
}

fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64, c: usize) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = img.get(x0, y0, c);
    let v10 = img.get(x1, y0, c);
    let v01 = img.get(x0, y1, c);
    let v11 = img.get(x1, y1, c);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

/// Seeds a scene model from the event-deblurred first view: the color latent
/// at the window midpoint is back-warped through the mid pose onto the canvas
/// (clamped to be non-negative), the residual starts at zero and the response
/// curve at identity.
pub fn init_from_edi(
    view: &TrainView,
    theta: f64,
    padding: usize,
    residual_channels: usize,
) -> Result<SceneModel> {
    let window = view.traj.window;
    let weights = edi_weights(&view.stream, window, theta, window.mid)?;
    let latent = edi_deblur_color(&view.gt_blur, &weights)?;
    let pose = view.traj.pose_at(window.mid)?;
    let (w, h) = (view.gt_blur.width, view.gt_blur.height);
    let mut model = SceneModel::new(w, h, padding, residual_channels)?;
    let (cx, cy) = model.view_center();
    let (s, c) = (-pose.angle).sin_cos();
    let (ox, oy) = model.canvas_origin;
    let cw = model.canvas.width;
    let chh = model.canvas.height;
    for j in 0..chh {
        for i in 0..cw {
            // Invert world = R (p - center) + center + t for this canvas cell.
            let wx = ox + i as f64 - cx - pose.tx;
            let wy = oy + j as f64 - cy - pose.ty;
            let vx = c * wx - s * wy + cx;
            let vy = s * wx + c * wy + cy;
            for ch in 0..3 {
                let v = sample_bilinear(&latent, vx, vy, ch).max(0.0);
                model.canvas.set(i, j, ch, v);
            }
        }
    }
    Ok(model)
}

/// Everything needed to restart training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: u8,
    /// Completed iterations of the current stage.
    pub iteration: u64,
    pub seed: u64,
    pub word_pos: u128,
    pub model: SceneModel,
    pub crf: CrfParams,
    pub adam_canvas: Adam,
    pub adam_crf: Adam,
    pub adam_residual: Adam,
}

impl TrainState {
    /// Fresh stage-1 state: model seeded from the first view's deblur.
    pub fn fresh(dataset: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let padding = match cfg.canvas_padding {
            Some(p) => p,
            None => auto_padding(dataset),
        };
        let model = init_from_edi(&dataset.views[0], cfg.theta, padding, cfg.residual_channels)?;
        let crf = CrfParams::identity(cfg.crf_knots, cfg.crf_per_channel)?;
        let adam_canvas = Adam::new(cfg.lr_canvas, model.canvas.data.len());
        let adam_crf = Adam::new(cfg.lr_crf, crf.raw().len());
        let adam_residual = Adam::new(cfg.lr_residual, model.residual.data.len());
        Ok(TrainState {
            stage: 1,
            iteration: 0,
            seed: cfg.seed,
            word_pos: 0,
            model,
            crf,
            adam_canvas,
            adam_crf,
            adam_residual,
        })
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&[self.stage])?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.word_pos.to_le_bytes())?;
        w.write_all(&(self.model.view_width as u64).to_le_bytes())?;
        w.write_all(&(self.model.view_height as u64).to_le_bytes())?;
        w.write_all(&self.model.canvas_origin.0.to_le_bytes())?;
        w.write_all(&self.model.canvas_origin.1.to_le_bytes())?;
        write_image(&mut w, &self.model.canvas)?;
        write_image(&mut w, &self.model.residual)?;
        w.write_all(&(self.crf.knots() as u64).to_le_bytes())?;
        w.write_all(&(self.crf.groups() as u64).to_le_bytes())?;
        write_f64s(&mut w, self.crf.raw())?;
        write_adam(&mut w, &self.adam_canvas)?;
        write_adam(&mut w, &self.adam_crf)?;
        write_adam(&mut w, &self.adam_residual)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(EvdiError::format("not a training state file"));
        }
        let version = read_u32(&mut r)?;
        if version != STATE_VERSION {
            return Err(EvdiError::format(format!(
                "unsupported state version {version}"
            )));
        }
        let mut stage = [0u8; 1];
        r.read_exact(&mut stage)?;
        let iteration = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let word_pos = read_u128(&mut r)?;
        let view_width = read_u64(&mut r)? as usize;
        let view_height = read_u64(&mut r)? as usize;
        let origin = (read_f64(&mut r)?, read_f64(&mut r)?);
        let canvas = read_image(&mut r)?;
        let residual = read_image(&mut r)?;
        let knots = read_u64(&mut r)? as usize;
        let groups = read_u64(&mut r)? as usize;
        let raw = read_f64s(&mut r, knots * groups)?;
        let crf = CrfParams::from_raw(raw, knots, groups)?;
        let adam_canvas = read_adam(&mut r, cfg.lr_canvas, canvas.data.len())?;
        let adam_crf = read_adam(&mut r, cfg.lr_crf, crf.raw().len())?;
        let adam_residual = read_adam(&mut r, cfg.lr_residual, residual.data.len())?;
        let model = SceneModel {
            canvas,
            residual,
            canvas_origin: origin,
            view_width,
            view_height,
        };
        Ok(TrainState {
            stage: stage[0],
            iteration,
            seed,
            word_pos,
            model,
            crf,
            adam_canvas,
            adam_crf,
            adam_residual,
        })
    }
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_image(w: &mut impl Write, img: &ImageBuffer) -> Result<()> {
    w.write_all(&(img.width as u64).to_le_bytes())?;
    w.write_all(&(img.height as u64).to_le_bytes())?;
    w.write_all(&(img.channels as u64).to_le_bytes())?;
    write_f64s(w, &img.data)
}

fn write_adam(w: &mut impl Write, a: &Adam) -> Result<()> {
    w.write_all(&a.t.to_le_bytes())?;
    write_f64s(w, &a.m)?;
    write_f64s(w, &a.v)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u128(r: &mut impl Read) -> Result<u128> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

fn read_image(r: &mut impl Read) -> Result<ImageBuffer> {
    let w = read_u64(r)? as usize;
    let h = read_u64(r)? as usize;
    let c = read_u64(r)? as usize;
    if w * h * c > (1 << 31) {
        return Err(EvdiError::format("unreasonable image dimensions in state"));
    }
    let data = read_f64s(r, w * h * c)?;
    ImageBuffer::new(w, h, c, data)
}

fn read_adam(r: &mut impl Read, lr: f64, n: usize) -> Result<Adam> {
    let t = read_u64(r)?;
    let m = read_f64s(r, n)?;
    let v = read_f64s(r, n)?;
    Ok(Adam { lr, t, m, v })
}

/// View visit order for one epoch, derived from the run seed and the epoch
/// index alone so a resumed run can rebuild mid-epoch orders without
/// disturbing the main sample stream.
fn epoch_order(seed: u64, stage: u8, epoch: u64, n: usize) -> Vec<usize> {
    let mix = seed
        ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha12Rng::seed_from_u64(mix);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn require_finite_report(report: &LossReport, iter: u64, view_id: &str) -> Result<()> {
    let finite = report.total.is_finite()
        && report.grad_canvas.is_finite()
        && report.grad_crf.iter().all(|g| g.is_finite());
    if finite {
        return Ok(());
    }
    let terms: Vec<String> = report
        .terms()
        .iter()
        .map(|(name, v)| format!("{name}={v}"))
        .collect();
    Err(EvdiError::numeric(format!(
        "non-finite loss or gradient at iteration {iter} on view {view_id}: {}",
        terms.join(" ")
    )))
}

/// Appends loss rows for one iteration as `iter,term,value` lines.
fn log_losses(w: &mut impl Write, iter: u64, terms: &[(&str, f64)]) -> Result<()> {
    for (name, value) in terms {
        writeln!(w, "{iter},{name},{value}")?;
    }
    Ok(())
}

fn open_loss_csv(path: &Path, fresh: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)?;
    if fresh || !exists {
        writeln!(file, "iter,term,value")?;
    }
    Ok(BufWriter::new(file))
}

/// Writes the inspectable checkpoint artifacts next to the state file.
pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    state.save(&dir.join("state.bin"))?;
    save_pfm(&dir.join("canvas.pfm"), &state.model.canvas)?;
    save_pfm(&dir.join("residual.pfm"), &flatten_channels(&state.model.residual))?;
    export_crf_csv(&dir.join("crf.csv"), &state.crf)?;
    let meta = format!(
        "stage {}\niteration {}\nview {}x{}\ncanvas {}x{}\nresidual_channels {}\norigin {} {}\n",
        state.stage,
        state.iteration,
        state.model.view_width,
        state.model.view_height,
        state.model.canvas.width,
        state.model.canvas.height,
        state.model.residual.channels,
        state.model.canvas_origin.0,
        state.model.canvas_origin.1,
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

/// PFM holds 1 or 3 channels; other channel counts are stored as a grayscale
/// image with the channels unrolled along x, which preserves the raw layout.
fn flatten_channels(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 || img.channels == 3 {
        return img.clone();
    }
    ImageBuffer {
        width: img.width * img.channels,
        height: img.height,
        channels: 1,
        data: img.data.clone(),
    }
}

/// Knot table as CSV: one row per knot position, one value column per group.
pub fn export_crf_csv(path: &Path, crf: &CrfParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..crf.groups()).map(|g| format!("y{g}")).collect();
    writeln!(w, "x,{}", header.join(","))?;
    for (x, ys) in crf.knot_table() {
        let row: Vec<String> = ys.iter().map(|y| format!("{y}")).collect();
        writeln!(w, "{x},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Diffusion machinery shared by both stages.
pub struct DiffusionSetup<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
}

/// Runs or resumes stage 1. `resume` loads `out_dir/state.bin`; otherwise the
/// model is seeded fresh from the first view. Returns the final state, which
/// is also saved to `out_dir`.
pub fn train_stage1(
    dataset: &Dataset,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: bool,
    diffusion: Option<&DiffusionSetup>,
) -> Result<TrainState> {
    if cfg.lambda_rsd > 0.0 && diffusion.is_none() {
        return Err(EvdiError::config(
            "lambda_rsd > 0 requires a diffusion setup",
        ));
    }
    fs::create_dir_all(out_dir)?;
    let state_path = out_dir.join("state.bin");
    let mut state = if resume {
        let s = TrainState::load(&state_path, cfg)?;
        if s.stage != 1 {
            return Err(EvdiError::config(format!(
                "cannot resume stage 1 from a stage-{} state",
                s.stage
            )));
        }
        s
    } else {
        TrainState::fresh(dataset, cfg)?
    };
    let total = cfg.stage1_iters as u64;
    let mut csv = open_loss_csv(&out_dir.join("loss_stage1.csv"), !resume)?;
    let mut rng = state.rng();
    let n_views = dataset.views.len();
    let crf_start = cfg.activation_iter(cfg.crf_warmup_frac, cfg.stage1_iters) as u64;
    let simul_start = cfg.activation_iter(cfg.simul_warmup_frac, cfg.stage1_iters) as u64;
    let mut order = epoch_order(state.seed, 1, state.iteration / n_views as u64, n_views);

    log::info!(
        "stage 1: {} -> {} iterations, {} views, canvas {}x{}",
        state.iteration,
        total,
        n_views,
        state.model.canvas.width,
        state.model.canvas.height
    );
    while state.iteration < total {
        let iter = state.iteration;
        let slot = (iter % n_views as u64) as usize;
        if slot == 0 {
            order = epoch_order(state.seed, 1, iter / n_views as u64, n_views);
        }
        let view = &dataset.views[order[slot]];
        let gates = StageGates {
            crf_active: iter >= crf_start,
            simul_active: iter >= simul_start,
        };
        let samples: IterationSamples =
            draw_samples(&mut rng, view, cfg, diffusion.map(|d| d.codec))?;
        let report = loss_stage1(
            &state.model,
            &state.crf,
            view,
            cfg,
            gates,
            &samples,
            diffusion.map(|d| (d.schedule, d.denoiser, d.codec)),
        )?;
        require_finite_report(&report, iter, &view.traj.view_id)?;
        state
            .adam_canvas
            .step(&mut state.model.canvas.data, &report.grad_canvas.data);
        if gates.crf_active {
            state.adam_crf.step(state.crf.raw_mut(), &report.grad_crf);
        }
        log_losses(&mut csv, iter, &report.terms())?;
        state.iteration = iter + 1;
        state.word_pos = rng.get_word_pos();
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every as u64 == 0 {
            csv.flush()?;
            save_checkpoint(out_dir, &state)?;
            log::info!("iter {}: total {:.6}", state.iteration, report.total);
        }
    }
    csv.flush()?;
    save_checkpoint(out_dir, &state)?;
    Ok(state)
}

/// Runs or resumes stage 2: the color canvas and the response curve stay
/// frozen while the residual features descend the denoising objective on
/// renders along the training trajectories.
pub fn train_stage2(
    dataset: &Dataset,
    cfg: &RunConfig,
    out_dir: &Path,
    mut state: TrainState,
    diffusion: &DiffusionSetup,
) -> Result<TrainState> {
    fs::create_dir_all(out_dir)?;
    if state.stage == 1 {
        state.stage = 2;
        state.iteration = 0;
    }
    let total = cfg.stage2_iters as u64;
    let fresh_csv = state.iteration == 0;
    let mut csv = open_loss_csv(&out_dir.join("loss_stage2.csv"), fresh_csv)?;
    let mut rng = state.rng();
    let n_views = dataset.views.len();
    let mut order = epoch_order(state.seed, 2, state.iteration / n_views as u64, n_views);

    log::info!(
        "stage 2: {} -> {} iterations, residual {} channels",
        state.iteration,
        total,
        state.model.residual.channels
    );
    while state.iteration < total {
        let iter = state.iteration;
        let slot = (iter % n_views as u64) as usize;
        if slot == 0 {
            order = epoch_order(state.seed, 2, iter / n_views as u64, n_views);
        }
        let view = &dataset.views[order[slot]];
        let t_idx = rng.gen_range(0..view.n_timesteps());
        let pose = view.traj.poses()[t_idx];
        let (lw, lh) = diffusion
            .codec
            .latent_dims(state.model.view_width, state.model.view_height);
        let like = ImageBuffer::zeros(lw, lh, 3)?;
        let noise = draw_rsd_noise(&mut rng, &like, cfg.coupled_noise);
        let t = stage2_timestep(
            iter as usize,
            cfg.stage2_iters,
            cfg.rsd_t_max,
            cfg.rsd_t_min,
            cfg.ddpm_steps,
        );
        let (value, grad_residual) = stage2_step(
            &state.model,
            &pose,
            diffusion.codec,
            diffusion.denoiser,
            diffusion.schedule,
            t,
            &noise,
        )?;
        if !value.is_finite() || !grad_residual.is_finite() {
            return Err(EvdiError::numeric(format!(
                "non-finite stage-2 loss at iteration {iter} on view {}: rsd={value}",
                view.traj.view_id
            )));
        }
        state
            .adam_residual
            .step(&mut state.model.residual.data, &grad_residual.data);
        log_losses(&mut csv, iter, &[("rsd", value)])?;
        state.iteration = iter + 1;
        state.word_pos = rng.get_word_pos();
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every as u64 == 0 {
            csv.flush()?;
            save_checkpoint(out_dir, &state)?;
            log::info!("iter {}: rsd {value:.6}", state.iteration);
        }
    }
    csv.flush()?;
    save_checkpoint(out_dir, &state)?;
    Ok(state)
}
