//! The renderer is differentiable: rendering records bilinear footprints so a
//! per-pixel loss gradient can be pushed back onto the learnable canvas. This
//! example checks a handful of analytic canvas gradients against central
//! finite differences.

use evdi::core::image::ImageBuffer;
use evdi::core::pose::Pose2;
use evdi::pipeline::standard_scene;
use evdi::scene::{backprop_render, render, RenderTarget, SceneModel};

fn half_sq_err(img: &ImageBuffer, target: &ImageBuffer) -> f64 {
    img.data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| 0.5 * (a - b) * (a - b))
        .sum()
}

fn main() -> evdi::Result<()> {
    let view = 48usize;
    let padding = 5usize;
    let canvas = standard_scene(3, view + 2 * padding, view + 2 * padding)?;
    let mut model = SceneModel::with_canvas(canvas, view, view, 1)?;
    let pose = Pose2::new(0.01, 1.3, -0.7)?;
    let target = ImageBuffer::zeros(view, view, 3)?;

    let (img, grads) = render(&model, &pose, RenderTarget::Color);
    let loss0 = half_sq_err(&img, &target);
    let mut grad_out = img.clone();
    for (g, t) in grad_out.data.iter_mut().zip(&target.data) {
        *g -= t;
    }
    let canvas_grad = backprop_render(&grad_out, &grads)?;
    println!(
        "rendered {view}x{view} view under pose (angle {:.3}, t {:.1},{:.1}); loss {loss0:.3}",
        pose.angle, pose.tx, pose.ty
    );

    // Probe canvas texels spread over the footprint, including some the view
    // never touches (their analytic gradient must be exactly zero).
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (x, y, c) in [
        (padding + 3, padding + 4, 0),
        (padding + 20, padding + 11, 1),
        (padding + 40, padding + 33, 2),
        (padding + 9, padding + 44, 0),
        (0, 0, 1),
    ] {
        let i = model.canvas.idx(x, y, c);
        let base = model.canvas.data[i];
        model.canvas.data[i] = base + h;
        let up = half_sq_err(&render(&model, &pose, RenderTarget::Color).0, &target);
        model.canvas.data[i] = base - h;
        let down = half_sq_err(&render(&model, &pose, RenderTarget::Color).0, &target);
        model.canvas.data[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let analytic = canvas_grad.get(x, y, c);
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        println!("canvas[{x:>2},{y:>2},{c}]  analytic {analytic:+.6}  numeric {numeric:+.6}");
        worst = worst.max(err);
        checked += 1;
    }
    println!("{checked} probes, worst relative error {worst:.2e}");
    assert!(worst < 1e-6);
    Ok(())
}
