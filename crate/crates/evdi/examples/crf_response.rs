//! The camera response curve is a learnable monotone map from scene radiance
//! to pixel value: a softmax over knot increments, so any raw parameter
//! vector realizes a valid curve with fixed endpoints 0 and 1. This example
//! fits the knots to a gamma curve by gradient descent on sampled pairs.

use evdi::core::image::ImageBuffer;
use evdi::crf::{backprop_crf, crf_apply, CrfParams};
use evdi::optimize::Adam;

const GAMMA: f64 = 2.2;

fn main() -> evdi::Result<()> {
    let mut params = CrfParams::identity(16, false)?;
    let xs = ImageBuffer::from_fn(256, 1, 1, |x, _, _| (x as f64 + 0.5) / 256.0)?;
    let target = ImageBuffer::from_fn(256, 1, 1, |x, _, _| ((x as f64 + 0.5) / 256.0).powf(1.0 / GAMMA))?;

    let (y0, _) = crf_apply(&params, &xs);
    let mse0: f64 = y0
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y0.data.len() as f64;
    println!("identity curve vs gamma {GAMMA}: mse {mse0:.5}");

    let mut adam = Adam::new(5e-2, params.raw().len());
    for step in 0..400 {
        let (y, grad) = crf_apply(&params, &xs);
        let mut grad_out = y.clone();
        for (g, t) in grad_out.data.iter_mut().zip(&target.data) {
            *g = 2.0 * (*g - t) / y.data.len() as f64;
        }
        let (_, grad_raw) = backprop_crf(&grad_out, &grad)?;
        adam.step(params.raw_mut(), &grad_raw);
        if step % 100 == 99 {
            let (y, _) = crf_apply(&params, &xs);
            let mse: f64 = y
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.data.len() as f64;
            println!("step {:>3}: mse {mse:.2e}", step + 1);
        }
    }

    // Realized knots stay monotone with pinned endpoints no matter what the
    // raw parameters did during optimization.
    let table = params.knot_table();
    assert_eq!(table.first().unwrap().1[0], 0.0);
    assert_eq!(table.last().unwrap().1[0], 1.0);
    assert!(table.windows(2).all(|w| w[1].1[0] >= w[0].1[0]));
    println!("fitted curve at x = 0, 0.25, 0.5, 0.75, 1:");
    for m in [0, 4, 8, 12, 16] {
        let (x, y) = &table[m];
        println!("  f({x:.4}) = {:.4}   gamma curve: {:.4}", y[0], x.powf(1.0 / GAMMA));
    }
    Ok(())
}
