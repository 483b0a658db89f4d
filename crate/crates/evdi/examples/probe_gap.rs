use evdi::blur::blur_average;
use evdi::core::event::ExposureWindow;
use evdi::core::pose::Pose2;
use evdi::crf::luma;
use evdi::edi::{edi_deblur, edi_weights};
use evdi::eventsim::{simulate_events, FrameSequence};
use evdi::pipeline::standard_scene;
use evdi::postprocess::psnr;
use evdi::scene::{render, RenderTarget, SceneModel};

fn main() -> evdi::Result<()> {
    let view = 128usize;
    for amp in [3.0f64, 5.0, 8.0, 12.0, 16.0] {
        let margin = amp.ceil() as usize + 2;
        let canvas = standard_scene(7, view + 2 * margin, view + 2 * margin)?;
        let gt = SceneModel::with_canvas(canvas, view, view, 3)?;
        let w = ExposureWindow::new(0.5, 0.4)?;
        let traj = evdi::core::pose::Trajectory::from_endpoints(
            "p",
            w,
            Pose2::new(0.0, -amp, 0.0)?,
            Pose2::new(0.0, amp, 0.0)?,
            64,
        )?;
        let mut lumas = Vec::new();
        for pose in traj.poses() {
            let (img, _) = render(&gt, pose, RenderTarget::Color);
            lumas.push(luma(&img)?);
        }
        let seq = FrameSequence::new(lumas.clone(), traj.timesteps().to_vec())?;
        let events = simulate_events(&seq, 0.2, 1e-3)?;
        let blurry = blur_average(&lumas)?;
        let weights = edi_weights(&events, w, 0.2, w.mid)?;
        let sharp = edi_deblur(&blurry, &weights)?;
        let mid = traj.len() / 2;
        let pb = psnr(&blurry, &lumas[mid], 1.0)?;
        let pe = psnr(&sharp, &lumas[mid], 1.0)?;
        println!(
            "amp ±{amp:>4.1}: blurry {pb:.2} dB, edi {pe:.2} dB, gap {:+.2} dB, {} events",
            pe - pb,
            events.len()
        );
    }
    Ok(())
}
