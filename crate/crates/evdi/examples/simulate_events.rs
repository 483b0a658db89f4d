//! Renders a short camera sweep over the built-in test card, simulates the
//! event stream its brightness changes fire, and checks the per-pixel
//! contract that links event counts back to log-brightness changes.

use evdi::crf::luma;
use evdi::eventsim::{simulate_events, FrameSequence};
use evdi::io::save_events_csv;
use evdi::pipeline::{standard_scene, standard_traj_lines};
use evdi::scene::{render, RenderTarget, SceneModel};

const THETA: f64 = 0.2;
const EPS_FLOOR: f64 = 1e-3;

fn main() -> evdi::Result<()> {
    let view = 96usize;
    let margin = 6usize;
    let canvas = standard_scene(7, view + 2 * margin, view + 2 * margin)?;
    let gt = SceneModel::with_canvas(canvas, view, view, 3)?;

    let line = &standard_traj_lines()[0];
    let traj = line.trajectory(48)?;
    let mut lumas = Vec::new();
    for pose in traj.poses() {
        let (img, _) = render(&gt, pose, RenderTarget::Color);
        lumas.push(luma(&img)?);
    }
    let seq = FrameSequence::new(lumas.clone(), traj.timesteps().to_vec())?;
    let stream = simulate_events(&seq, THETA, EPS_FLOOR)?;

    let (pos, neg): (usize, usize) = stream
        .events()
        .iter()
        .fold((0, 0), |(p, n), e| match e.polarity {
            1 => (p + 1, n),
            _ => (p, n + 1),
        });
    println!(
        "camera sweep {:?} -> {:?} over {} frames at {}x{}",
        (line.first.tx, line.first.ty),
        (line.last.tx, line.last.ty),
        traj.len(),
        view,
        view
    );
    println!(
        "{} events ({pos} brightening, {neg} darkening), {:.2} per pixel",
        stream.len(),
        stream.len() as f64 / (view * view) as f64
    );

    // Each event stands for one threshold crossing, so theta * signed count
    // can never be off the true log-brightness change by more than theta.
    let window = line.window;
    let first = &lumas[0];
    let last = &lumas[lumas.len() - 1];
    let mut worst = 0.0f64;
    for y in 0..view {
        for x in 0..view {
            let dl = (last.get(x, y, 0).max(EPS_FLOOR)).ln()
                - (first.get(x, y, 0).max(EPS_FLOOR)).ln();
            let count = stream.accumulate(x, y, window.start(), window.end())?;
            worst = worst.max((dl - THETA * count as f64).abs());
        }
    }
    println!("worst |true dlogL - theta*count| = {worst:.4} (bound {THETA})");
    assert!(worst <= THETA + 1e-9);

    let out = std::env::temp_dir().join("evdi_example_events.csv");
    save_events_csv(&out, &stream)?;
    println!("stream written to {}", out.display());
    Ok(())
}
