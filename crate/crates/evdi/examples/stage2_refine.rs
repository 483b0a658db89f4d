//! Second-stage refinement: after the canvas and response curve are fit, a
//! residual feature canvas is trained under the diffusion prior while
//! everything from stage one stays frozen.

use evdi::core::config::RunConfig;
use evdi::core::pose::Pose2;
use evdi::diffusion::refine_render;
use evdi::optimize::{train_stage1, train_stage2, Dataset, DiffusionSetup};
use evdi::pipeline::{build_codec, build_denoiser, build_schedule, synthesize_views};
use evdi::scene::{render, RenderTarget};
use std::fs;

fn main() -> evdi::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.view_width = 64;
    cfg.view_height = 64;
    cfg.n_poses = 5;
    cfg.frames_per_view = 24;
    cfg.stage1_iters = 120;
    cfg.stage2_iters = 60;
    cfg.checkpoint_every = 0;
    cfg.ddpm_steps = 200;
    cfg.rsd_t_max = 160;
    cfg.rsd_t_min = 10;

    let (_, views) = synthesize_views(&cfg)?;
    let dataset = Dataset::new(views)?;
    let schedule = build_schedule(&cfg)?;
    let denoiser = build_denoiser(&cfg);
    let codec = build_codec(&cfg);
    let setup = DiffusionSetup {
        schedule: &schedule,
        denoiser: denoiser.as_ref(),
        codec: codec.as_ref(),
    };

    let out = std::env::temp_dir().join("evdi_example_stage2");
    let _ = fs::remove_dir_all(&out);
    let stage1 = train_stage1(&dataset, &cfg, &out.join("stage1"), false, Some(&setup))?;
    let canvas_before = stage1.model.canvas.data.clone();
    let crf_before = stage1.crf.raw().to_vec();
    let residual_norm_before: f64 = stage1.model.residual.data.iter().map(|v| v * v).sum();
    println!(
        "stage 1 done after {} iterations; residual energy {residual_norm_before:.1e}",
        stage1.iteration
    );

    let refined = train_stage2(&dataset, &cfg, &out.join("stage2"), stage1, &setup)?;
    assert_eq!(refined.model.canvas.data, canvas_before);
    assert_eq!(refined.crf.raw(), &crf_before[..]);
    let residual_norm: f64 = refined.model.residual.data.iter().map(|v| v * v).sum();
    println!(
        "stage 2 done after {} iterations; canvas and response curve untouched, \
         residual energy {residual_norm:.3e}",
        refined.iteration
    );
    assert!(residual_norm > 0.0);

    // The residual shifts the final render away from the plain color render.
    let pose = Pose2::identity();
    let plain = render(&refined.model, &pose, RenderTarget::Color).0;
    let final_img = refine_render(&refined.model, &pose, codec.as_ref())?;
    let shift = plain
        .data
        .iter()
        .zip(&final_img.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max |refined - plain render| at the identity pose: {shift:.3e}");
    assert!(shift > 0.0);
    Ok(())
}
