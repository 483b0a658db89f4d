use evdi::core::config::RunConfig;
use evdi::crf::luma;
use evdi::optimize::TrainState;
use evdi::pipeline::load_dataset;
use evdi::postprocess::psnr;
use evdi::scene::{render, RenderTarget};
use std::path::Path;

fn main() -> evdi::Result<()> {
    let out = Path::new("/tmp/c6full_out");
    let mut cfg = RunConfig::default();
    cfg.lambda_rsd = 0.0;
    let dataset = load_dataset(&out.join("dataset"), &cfg)?;
    let state = TrainState::load(&out.join("stage1/state.bin"), &cfg)?;
    for (i, v) in dataset.views.iter().enumerate() {
        let mid_pose = v.traj.pose_at(v.traj.window.mid)?;
        let rendered = render(&state.model, &mid_pose, RenderTarget::Color)
            .0
            .clamped(0.0, 1.0);
        let gt = v.gt_mid.as_ref().unwrap();
        println!(
            "view {i}: color {:.2} dB, luma {:.2} dB",
            psnr(&rendered, gt, 1.0)?,
            psnr(&luma(&rendered)?, &luma(gt)?, 1.0)?
        );
    }
    Ok(())
}
