//! Finite-difference checks for analytic gradients.
//!
//! Central differences with a caller-chosen step; comparisons use a combined
//! relative/absolute tolerance so exactly-zero gradients (which occur for
//! black-box denoisers) don't fail on rounding noise.

/// Central difference of `f` at `x` with step `h`: (f(x+h) - f(x-h)) / (2h).
pub fn central_diff<F: FnMut(f64) -> f64>(h: f64, x: f64, mut f: F) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// True when `analytic` and `numeric` agree within
/// `rel * max(|analytic|, |numeric|) + abs`.
pub fn grads_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs
}

/// Checks a sampled subset of coordinates of an analytic gradient against
/// central differences of `f`. `params` is mutated in place during probing
/// and restored before return. Returns the worst (index, analytic, numeric)
/// violation, or None when every sampled coordinate passes.
pub fn check_grad_subset<F>(
    params: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    rel: f64,
    abs: f64,
    mut f: F,
) -> Option<(usize, f64, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for &i in indices {
        let old = params[i];
        params[i] = old + h;
        let fp = f(params);
        params[i] = old - h;
        let fm = f(params);
        params[i] = old;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        if !grads_close(a, numeric, rel, abs) {
            let err = (a - numeric).abs();
            if worst.map_or(true, |(_, _, _, w)| err > w) {
                worst = Some((i, a, numeric, err));
            }
        }
    }
    worst.map(|(i, a, n, _)| (i, a, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_is_exact_for_quadratics() {
        let d = central_diff(1e-3, 2.0, |x| 3.0 * x * x + x - 5.0);
        assert!((d - 13.0).abs() < 1e-9);
    }

    #[test]
    fn close_check_handles_zero_gradients() {
        assert!(grads_close(0.0, 3e-9, 1e-4, 1e-8));
        assert!(!grads_close(0.0, 1e-3, 1e-4, 1e-8));
    }

    #[test]
    fn subset_check_flags_a_wrong_coordinate() {
        let mut params = vec![0.5, -0.3, 1.2];
        let analytic = vec![2.0 * 0.5, 2.0 * -0.3, 0.0]; // last one wrong
        let indices = [0, 1, 2];
        let bad = check_grad_subset(&mut params, &analytic, &indices, 1e-5, 1e-6, 1e-10, |p| {
            p.iter().map(|v| v * v).sum()
        });
        let (i, _, numeric) = bad.expect("coordinate 2 must fail");
        assert_eq!(i, 2);
        assert!((numeric - 2.4).abs() < 1e-6);
        assert_eq!(params, vec![0.5, -0.3, 1.2]);
    }
}
