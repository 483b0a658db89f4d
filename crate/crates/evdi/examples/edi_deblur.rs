//! Sharpens a motion-blurred frame with its event stream: the events say how
//! log-brightness moved during the exposure, which pins down the sharp frame
//! at any reference time inside the window.

use evdi::blur::blur_average;
use evdi::crf::luma;
use evdi::edi::{edi_deblur, edi_deblur_color, edi_weights, warp_latent};
use evdi::eventsim::{simulate_events, FrameSequence};
use evdi::pipeline::{standard_scene, standard_traj_lines};
use evdi::postprocess::psnr;
use evdi::scene::{render, RenderTarget, SceneModel};

const THETA: f64 = 0.2;

fn main() -> evdi::Result<()> {
    let view = 96usize;
    let margin = 6usize;
    let canvas = standard_scene(11, view + 2 * margin, view + 2 * margin)?;
    let gt = SceneModel::with_canvas(canvas, view, view, 3)?;

    let line = &standard_traj_lines()[2];
    let traj = line.trajectory(48)?;
    let mut colors = Vec::new();
    let mut lumas = Vec::new();
    for pose in traj.poses() {
        let (img, _) = render(&gt, pose, RenderTarget::Color);
        lumas.push(luma(&img)?);
        colors.push(img);
    }
    let seq = FrameSequence::new(lumas.clone(), traj.timesteps().to_vec())?;
    let events = simulate_events(&seq, THETA, 1e-3)?;

    let blurry_color = blur_average(&colors)?;
    let blurry_gray = luma(&blurry_color)?;
    let mid = traj.len() / 2;

    let weights = edi_weights(&events, line.window, THETA, line.window.mid)?;
    let sharp_gray = edi_deblur(&blurry_gray, &weights)?;
    let sharp_color = edi_deblur_color(&blurry_color, &weights)?;

    println!(
        "diagonal sweep, {} frames averaged into one blurry exposure",
        traj.len()
    );
    println!(
        "gray : blurry {:.2} dB -> deblurred {:.2} dB against the true mid frame",
        psnr(&blurry_gray, &lumas[mid], 1.0)?,
        psnr(&sharp_gray, &lumas[mid], 1.0)?
    );
    println!(
        "color: blurry {:.2} dB -> deblurred {:.2} dB",
        psnr(&blurry_color, &colors[mid], 1.0)?,
        psnr(&sharp_color, &colors[mid], 1.0)?
    );

    // The same event warp transports a latent to any other instant; warping
    // forward then back is exact because the factors cancel per pixel.
    let t_late = line.window.start() + 0.9 * (line.window.end() - line.window.start());
    let late = warp_latent(&sharp_gray, &events, THETA, line.window.mid, t_late)?;
    let back = warp_latent(&late, &events, THETA, t_late, line.window.mid)?;
    let round_trip = sharp_gray
        .data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("warp to t={t_late:.2} and back, max round-trip error {round_trip:.2e}");
    Ok(())
}
