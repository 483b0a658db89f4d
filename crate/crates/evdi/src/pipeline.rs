//! Dataset synthesis, dataset IO and the end-to-end reconstruction run.
//!
//! A dataset is a directory of views, each holding the blurry capture, the
//! events recorded during its exposure, the camera trajectory and (for
//! synthetic data) the true mid-exposure frame:
//!
//! ```text
//! dataset/
//!   traj.txt             all trajectory lines
//!   scene.pfm            ground-truth scene canvas (synthetic only)
//!   views/<id>/
//!     traj.txt           this view's trajectory line
//!     gt_blur.png        8-bit capture
//!     gt_blur.pfm        lossless float capture
//!     events.csv         events during the exposure
//!     gt_mid.pfm         true mid-exposure frame (synthetic only)
//! ```
//!
//! Trajectory lines are `view_id t_mid tau angle0 tx0 ty0 angle1 tx1 ty1`
//! with `#` comments; intermediate poses are interpolated between the two
//! endpoint poses. Everything here is deterministic given the run config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::blur::{blur_average, synth_blur};
use crate::core::{
    BlurMode, CodecKind, DenoiserKind, ExposureWindow, ImageBuffer, Pose2, RunConfig, Trajectory,
};
use crate::crf::luma;
use crate::diffusion::{
    refine_render, AvgPoolCodec, Denoiser, DiffusionSchedule, IdentityCodec, LatentCodec,
    OracleDenoiser, ShrinkageDenoiser, ZeroDenoiser,
};
use crate::error::{EvdiError, Result};
use crate::eventsim::{simulate_events, FrameSequence};
use crate::io::{load_events_csv, load_pfm, load_png, save_events_csv, save_pfm, save_png};
use crate::losses::TrainView;
use crate::optimize::{train_stage1, train_stage2, Dataset, DiffusionSetup};
use crate::postprocess::{color_correct, psnr, ssim};
use crate::scene::{render, RenderTarget, SceneModel};

/// One view's trajectory as written in a spec file: an exposure window and
/// the endpoint poses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajLine {
    pub view_id: String,
    pub window: ExposureWindow,
    pub first: Pose2,
    pub last: Pose2,
}

impl TrajLine {
    pub fn format(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {} {}",
            self.view_id,
            self.window.mid,
            self.window.tau,
            self.first.angle,
            self.first.tx,
            self.first.ty,
            self.last.angle,
            self.last.tx,
            self.last.ty
        )
    }

    pub fn trajectory(&self, n_poses: usize) -> Result<Trajectory> {
        Trajectory::from_endpoints(
            self.view_id.clone(),
            self.window,
            self.first,
            self.last,
            n_poses,
        )
    }
}

pub fn parse_traj_spec(text: &str) -> Result<Vec<TrajLine>> {
    let mut lines = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(EvdiError::format(format!(
                "trajectory line {}: expected 9 fields \
                 (view_id t_mid tau angle0 tx0 ty0 angle1 tx1 ty1), got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| {
                EvdiError::format(format!(
                    "trajectory line {}: field {} ('{}') is not a number",
                    lineno + 1,
                    i + 1,
                    fields[i]
                ))
            })
        };
        let window = ExposureWindow::new(num(1)?, num(2)?)?;
        let first = Pose2::new(num(3)?, num(4)?, num(5)?)?;
        let last = Pose2::new(num(6)?, num(7)?, num(8)?)?;
        lines.push(TrajLine {
            view_id: fields[0].to_string(),
            window,
            first,
            last,
        });
    }
    if lines.is_empty() {
        return Err(EvdiError::format("trajectory spec contains no views"));
    }
    Ok(lines)
}

pub fn format_traj_spec(lines: &[TrajLine]) -> String {
    let mut out = String::from("# view_id t_mid tau angle0 tx0 ty0 angle1 tx1 ty1\n");
    for line in lines {
        out.push_str(&line.format());
        out.push('\n');
    }
    out
}

/// The four stock camera sweeps used when no trajectory spec is given: two
/// axis-aligned pans and two diagonal pans with a little rotation.
pub fn standard_traj_lines() -> Vec<TrajLine> {
    let w = ExposureWindow::new(0.5, 0.4).expect("static window");
    let p = |a: f64, tx: f64, ty: f64| Pose2::new(a, tx, ty).expect("static pose");
    vec![
        TrajLine {
            view_id: "v0".into(),
            window: w,
            first: p(0.0, -8.0, 0.0),
            last: p(0.0, 8.0, 0.0),
        },
        TrajLine {
            view_id: "v1".into(),
            window: w,
            first: p(0.0, 0.0, -8.0),
            last: p(0.0, 0.0, 8.0),
        },
        TrajLine {
            view_id: "v2".into(),
            window: w,
            first: p(-0.02, -5.5, -5.5),
            last: p(0.02, 5.5, 5.5),
        },
        // Asymmetric on purpose: its mid-exposure pose is off-center, so
        // evaluation probes more than the canvas center.
        TrajLine {
            view_id: "v3".into(),
            window: w,
            first: p(0.015, 8.5, -5.0),
            last: p(-0.015, -3.5, 3.0),
        },
    ]
}

/// Largest pixel displacement any interpolated pose applies to a view corner.
pub fn max_displacement(lines: &[TrajLine], view_w: usize, view_h: usize, n: usize) -> Result<f64> {
    let cx = (view_w as f64 - 1.0) / 2.0;
    let cy = (view_h as f64 - 1.0) / 2.0;
    let corners = [
        (0.0, 0.0),
        (view_w as f64 - 1.0, 0.0),
        (0.0, view_h as f64 - 1.0),
        (view_w as f64 - 1.0, view_h as f64 - 1.0),
    ];
    let mut max_disp = 0.0f64;
    for line in lines {
        let traj = line.trajectory(n.max(2))?;
        for pose in traj.poses() {
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
    Ok(max_disp)
}

/// Procedural test card: a seeded sum of oriented color sinusoids plus a few
/// soft blobs, clamped to valid range. Texture at several scales so motion
/// blur destroys detail and events carry real signal.
pub fn standard_scene(seed: u64, width: usize, height: usize) -> Result<ImageBuffer> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5CE9E5_CE9E);
    struct Wave {
        kx: f64,
        ky: f64,
        amp: f64,
        phase: [f64; 3],
    }
    let n_waves = 16;
    let waves: Vec<Wave> = (0..n_waves)
        .map(|i| {
            // Stratified directions: blur along any axis meets comparable
            // texture, whatever the seed draws.
            let ang = (i as f64 + rng.gen_range(0.0..1.0)) * std::f64::consts::PI
                / n_waves as f64;
            let freq = rng.gen_range(0.25..1.4);
            let amp = rng.gen_range(0.05..0.14);
            let base = rng.gen_range(0.0..std::f64::consts::TAU);
            let chroma = rng.gen_range(0.0..0.8);
            Wave {
                kx: freq * ang.cos(),
                ky: freq * ang.sin(),
                amp,
                phase: [base, base + chroma, base + 2.0 * chroma],
            }
        })
        .collect();
    struct Blob {
        x: f64,
        y: f64,
        inv2s2: f64,
        amp: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..4)
        .map(|_| {
            let sigma = rng.gen_range(6.0..16.0);
            Blob {
                x: rng.gen_range(0.15..0.85) * width as f64,
                y: rng.gen_range(0.15..0.85) * height as f64,
                inv2s2: 1.0 / (2.0 * sigma * sigma),
                amp: [
                    rng.gen_range(-0.12..0.12),
                    rng.gen_range(-0.12..0.12),
                    rng.gen_range(-0.12..0.12),
                ],
            }
        })
        .collect();
    ImageBuffer::from_fn(width, height, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.35;
        for w in &waves {
            v += w.amp * (w.kx * xf + w.ky * yf + w.phase[c]).sin();
        }
        for b in &blobs {
            let r2 = (xf - b.x).powi(2) + (yf - b.y).powi(2);
            v += b.amp[c] * (-r2 * b.inv2s2).exp();
        }
        v.clamp(0.02, 0.97)
    })
}

/// Resolves `cfg.scene` into a ground-truth canvas with at least `margin`
/// pixels around the view on every side. Built-in scenes are generated at
/// exactly that margin; file scenes must already be large enough.
pub fn scene_canvas(cfg: &RunConfig, margin: usize) -> Result<ImageBuffer> {
    if let Some(name) = cfg.scene.strip_prefix("builtin:") {
        return match name {
            "standard" => standard_scene(
                cfg.seed,
                cfg.view_width + 2 * margin,
                cfg.view_height + 2 * margin,
            ),
            other => Err(EvdiError::config(format!(
                "unknown builtin scene '{other}' (have: standard)"
            ))),
        };
    }
    let path = Path::new(&cfg.scene);
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => load_pfm(path)?,
        _ => load_png(path)?,
    };
    let img = if img.channels == 1 { img.replicate_rgb()? } else { img };
    let (need_w, need_h) = (cfg.view_width + 2 * margin, cfg.view_height + 2 * margin);
    if img.width < need_w || img.height < need_h {
        return Err(EvdiError::domain(format!(
            "trajectories escape the scene canvas: {}x{} available, need at least \
             {need_w}x{need_h} ({margin} px of margin around the {}x{} view)",
            img.width, img.height, cfg.view_width, cfg.view_height
        )));
    }
    Ok(img)
}

fn traj_lines_for(cfg: &RunConfig) -> Result<Vec<TrajLine>> {
    match &cfg.traj_spec {
        Some(path) => parse_traj_spec(&fs::read_to_string(path)?),
        None => Ok(standard_traj_lines()),
    }
}

/// Synthesizes the ground-truth scene and all training views in memory.
/// Returns the scene model the views were rendered from and the views
/// themselves, each carrying its blurry capture, events, trajectory and true
/// mid-exposure frame.
pub fn synthesize_views(cfg: &RunConfig) -> Result<(SceneModel, Vec<TrainView>)> {
    let lines = traj_lines_for(cfg)?;
    let margin = max_displacement(&lines, cfg.view_width, cfg.view_height, cfg.frames_per_view)?
        .ceil() as usize
        + 2;
    let canvas = scene_canvas(cfg, margin)?;
    let gt = SceneModel::with_canvas(canvas, cfg.view_width, cfg.view_height, 3)?;
    // Views are independent; parallel synthesis with order-preserving collect
    // stays bit-identical to the serial loop.
    let views = lines
        .par_iter()
        .map(|line| synthesize_view(&gt, line, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((gt, views))
}

fn synthesize_view(gt: &SceneModel, line: &TrajLine, cfg: &RunConfig) -> Result<TrainView> {
    let train_traj = line.trajectory(cfg.n_poses)?;
    let dense = line.trajectory(cfg.frames_per_view)?;
    let mut frames = Vec::with_capacity(dense.len());
    let mut lumas = Vec::with_capacity(dense.len());
    for pose in dense.poses() {
        let (img, _) = render(gt, pose, RenderTarget::Color);
        lumas.push(luma(&img)?);
        frames.push(img);
    }
    let seq = FrameSequence::new(lumas, dense.timesteps().to_vec())?;
    let stream = simulate_events(&seq, cfg.theta, cfg.eps_floor)?;
    let gt_blur = match cfg.blur_mode {
        BlurMode::Dense => blur_average(&frames)?,
        BlurMode::Poses => synth_blur(gt, &train_traj).0,
    };
    let mid_pose = train_traj.pose_at(line.window.mid)?;
    let (gt_mid, _) = render(gt, &mid_pose, RenderTarget::Color);
    TrainView::new(gt_blur, stream, train_traj, Some(gt_mid), cfg.theta)
}

/// Writes a synthetic dataset to `out_dir` (see module docs for the layout).
pub fn make_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    write_views(cfg, out_dir, true)
}

/// [`make_dataset`] without the event streams: blurry captures, sharp ground
/// truth and trajectories only.
pub fn make_blur_set(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    write_views(cfg, out_dir, false)
}

fn write_views(cfg: &RunConfig, out_dir: &Path, with_events: bool) -> Result<()> {
    let lines = traj_lines_for(cfg)?;
    let (gt, views) = synthesize_views(cfg)?;
    fs::create_dir_all(out_dir)?;
    save_pfm(&out_dir.join("scene.pfm"), &gt.canvas)?;
    fs::write(out_dir.join("traj.txt"), format_traj_spec(&lines))?;
    for (line, view) in lines.iter().zip(&views) {
        let dir = out_dir.join("views").join(&line.view_id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("traj.txt"), format!("{}\n", line.format()))?;
        save_png(&dir.join("gt_blur.png"), &view.gt_blur)?;
        save_pfm(&dir.join("gt_blur.pfm"), &view.gt_blur)?;
        if with_events {
            save_events_csv(&dir.join("events.csv"), &view.stream)?;
        }
        let gt_mid = view.gt_mid.as_ref().expect("synthetic views carry gt_mid");
        save_pfm(&dir.join("gt_mid.pfm"), gt_mid)?;
        log::info!(
            "view {}: {} events, blur range [{:.3}, {:.3}]",
            line.view_id,
            view.stream.len(),
            view.gt_blur.data.iter().cloned().fold(f64::INFINITY, f64::min),
            view.gt_blur.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok(())
}

/// Loads a dataset directory written by [`make_dataset`] (or assembled by
/// hand in the same layout). The float blur is preferred over the 8-bit PNG
/// when both exist; `gt_mid.pfm` is optional.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let views_dir = dir.join("views");
    let mut ids: Vec<PathBuf> = fs::read_dir(&views_dir)
        .map_err(|e| {
            EvdiError::format(format!(
                "dataset at {} has no views/ directory: {e}",
                dir.display()
            ))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(EvdiError::format("dataset has no views"));
    }
    let mut views = Vec::with_capacity(ids.len());
    for vdir in ids {
        let lines = parse_traj_spec(&fs::read_to_string(vdir.join("traj.txt"))?)?;
        let [line]: [TrajLine; 1] = lines.try_into().map_err(|_| {
            EvdiError::format(format!(
                "{}: per-view traj.txt must hold exactly one line",
                vdir.display()
            ))
        })?;
        let traj = line.trajectory(cfg.n_poses)?;
        let pfm = vdir.join("gt_blur.pfm");
        let gt_blur = if pfm.exists() {
            load_pfm(&pfm)?
        } else {
            load_png(&vdir.join("gt_blur.png"))?
        };
        let stream = load_events_csv(
            &vdir.join("events.csv"),
            gt_blur.width,
            gt_blur.height,
            line.window,
        )?;
        let mid = vdir.join("gt_mid.pfm");
        let gt_mid = if mid.exists() { Some(load_pfm(&mid)?) } else { None };
        views.push(TrainView::new(gt_blur, stream, traj, gt_mid, cfg.theta)?);
    }
    Dataset::new(views)
}

pub fn build_schedule(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(cfg.ddpm_steps, cfg.beta_start, cfg.beta_end)
}

pub fn build_denoiser(cfg: &RunConfig) -> Box<dyn Denoiser> {
    match cfg.denoiser {
        DenoiserKind::Zero => Box::new(ZeroDenoiser),
        DenoiserKind::Oracle => Box::new(OracleDenoiser::new()),
        DenoiserKind::Shrinkage => Box::new(ShrinkageDenoiser {
            blur_radius: cfg.shrinkage_blur_radius,
        }),
    }
}

pub fn build_codec(cfg: &RunConfig) -> Box<dyn LatentCodec> {
    match cfg.codec {
        CodecKind::Identity => Box::new(IdentityCodec),
        CodecKind::AvgPool => Box::new(AvgPoolCodec::default()),
    }
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub view_id: String,
    pub variant: &'static str,
    pub psnr: f64,
    pub ssim: f64,
}

/// CSV table of metric rows, stable field formatting so identical runs give
/// identical bytes.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("view,variant,psnr,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.view_id, r.variant, r.psnr, r.ssim
        ));
    }
    out
}

fn clamp01(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Horizontal concatenation with a thin white gutter, for side-by-side
/// inspection panels.
pub fn hstack(images: &[&ImageBuffer]) -> Result<ImageBuffer> {
    let Some(first) = images.first() else {
        return Err(EvdiError::domain("hstack needs at least one image"));
    };
    let gutter = 2usize;
    let (h, c) = (first.height, first.channels);
    let mut w_total = 0;
    for img in images {
        if img.height != h || img.channels != c {
            return Err(EvdiError::shape("hstack inputs must share height and channels"));
        }
        w_total += img.width;
    }
    w_total += gutter * (images.len() - 1);
    let mut out = ImageBuffer::zeros(w_total, h, c)?;
    for v in &mut out.data {
        *v = 1.0;
    }
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width {
                for ch in 0..c {
                    out.set(x0 + x, y, ch, img.get(x, y, ch));
                }
            }
        }
        x0 += img.width + gutter;
    }
    Ok(out)
}

#[derive(Debug)]
pub struct PipelineReport {
    pub metrics: Vec<MetricRow>,
    pub metrics_csv: String,
    pub dataset_dir: PathBuf,
}

fn metric_row(view_id: &str, variant: &'static str, img: &ImageBuffer, gt: &ImageBuffer) -> Result<MetricRow> {
    Ok(MetricRow {
        view_id: view_id.to_string(),
        variant,
        psnr: psnr(img, gt, 1.0)?,
        ssim: ssim(img, gt)?,
    })
}

/// The whole reconstruction, end to end: synthesize or load the dataset,
/// stage-1 fit, stage-2 residual refinement (unless skipped), then per-view
/// evaluation at the mid-exposure pose against the true mid frame. Writes
/// `metrics.csv` and side-by-side panels under `out_dir` and returns the
/// metric rows.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineReport> {
    fs::create_dir_all(out_dir)?;
    let dataset_dir = match &cfg.dataset_dir {
        Some(d) => d.clone(),
        None => {
            let d = out_dir.join("dataset");
            log::info!("synthesizing dataset into {}", d.display());
            make_dataset(cfg, &d)?;
            d
        }
    };
    let dataset = load_dataset(&dataset_dir, cfg)?;
    let schedule = build_schedule(cfg)?;
    let denoiser = build_denoiser(cfg);
    let codec = build_codec(cfg);
    let setup = DiffusionSetup {
        schedule: &schedule,
        denoiser: denoiser.as_ref(),
        codec: codec.as_ref(),
    };
    let stage1_setup = if cfg.lambda_rsd > 0.0 { Some(&setup) } else { None };
    let state = train_stage1(&dataset, cfg, &out_dir.join("stage1"), false, stage1_setup)?;
    let state = if cfg.skip_stage2 {
        state
    } else {
        train_stage2(&dataset, cfg, &out_dir.join("stage2"), state, &setup)?
    };

    let panels_dir = out_dir.join("panels");
    fs::create_dir_all(&panels_dir)?;
    let mut rows = Vec::new();
    for view in &dataset.views {
        let Some(gt_mid) = &view.gt_mid else {
            log::info!("view {} has no gt_mid.pfm; skipping metrics", view.traj.view_id);
            continue;
        };
        let id = view.traj.view_id.as_str();
        let pose = view.traj.pose_at(view.traj.window.mid)?;
        let (raw_render, _) = render(&state.model, &pose, RenderTarget::Color);
        let stage1_img = clamp01(&raw_render);
        rows.push(metric_row(id, "blurry", &view.gt_blur, gt_mid)?);
        rows.push(metric_row(id, "stage1", &stage1_img, gt_mid)?);
        let final_img = if cfg.skip_stage2 {
            stage1_img.clone()
        } else {
            let refined = clamp01(&refine_render(&state.model, &pose, codec.as_ref())?);
            let corrected = color_correct(&refined, &stage1_img, 2)?;
            rows.push(metric_row(id, "refined", &corrected, gt_mid)?);
            corrected
        };
        let panel = hstack(&[&view.gt_blur, &stage1_img, &final_img, gt_mid])?;
        save_png(&panels_dir.join(format!("{id}.png")), &panel)?;
    }
    let csv = metrics_csv(&rows);
    fs::write(out_dir.join("metrics.csv"), &csv)?;
    Ok(PipelineReport {
        metrics: rows,
        metrics_csv: csv,
        dataset_dir,
    })
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()),
        Some("png") | Some("pfm")
    )
}

fn load_any_image(p: &Path) -> Result<ImageBuffer> {
    match p.extension().and_then(|e| e.to_str()) {
        Some("pfm") => load_pfm(p),
        _ => load_png(p),
    }
}

/// Compares same-named images from two directories; returns a CSV table
/// `name,psnr,ssim` over the files present in both.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<String> {
    let mut preds: Vec<PathBuf> = fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    preds.sort();
    if preds.is_empty() {
        return Err(EvdiError::domain(format!(
            "no .png/.pfm files in {}",
            pred_dir.display()
        )));
    }
    let mut out = String::from("name,psnr,ssim\n");
    let mut matched = 0;
    for pred_path in preds {
        let stem = pred_path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let gt_path = ["pfm", "png"]
            .iter()
            .map(|ext| gt_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists());
        let Some(gt_path) = gt_path else { continue };
        let pred = load_any_image(&pred_path)?;
        let gt = load_any_image(&gt_path)?;
        let p = psnr(&pred, &gt, 1.0)?;
        let s = ssim(&pred, &gt)?;
        out.push_str(&format!("{stem},{p:.6},{s:.6}\n"));
        matched += 1;
    }
    if matched == 0 {
        return Err(EvdiError::domain(format!(
            "no prediction in {} has a same-named ground truth in {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    Ok(out)
}

/// Loads the image files of a directory in name order, for the event
/// simulation command.
pub fn load_frames_sorted(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(EvdiError::domain(format!(
            "need at least 2 frames in {}, found {}",
            dir.display(),
            paths.len()
        )));
    }
    paths.iter().map(|p| load_any_image(p)).collect()
}
