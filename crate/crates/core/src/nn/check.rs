//! Central finite-difference utilities for validating analytic gradients.
//!
//! All checks run at `f64`. Callers probe a handful of randomly chosen
//! coordinates instead of full Jacobians, and filter points that sit on
//! non-differentiable kinks before comparing.

use ndarray::ArrayD;

/// Central difference of `f` along coordinate `idx` of `x`.
pub fn central_diff<Func>(f: &mut Func, x: &ArrayD<f64>, idx: &[usize], eps: f64) -> f64
where
    Func: FnMut(&ArrayD<f64>) -> f64,
{
    let mut xp = x.clone();
    xp[idx] += eps;
    let fp = f(&xp);
    let mut xm = x.clone();
    xm[idx] -= eps;
    let fm = f(&xm);
    (fp - fm) / (2.0 * eps)
}

/// Relative error between an analytic and a numeric derivative.
///
/// Normalized by `max(|a|, |n|, floor)` so near-zero pairs compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Checks `analytic` against central differences at `n_probes` coordinates.
///
/// Coordinates are drawn with `pick`, which may reject kink-adjacent indices
/// by returning `None` for that attempt. Panics with context on failure.
pub fn assert_grad_matches<Func, Pick>(
    f: &mut Func,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    n_probes: usize,
    eps: f64,
    tol: f64,
    mut pick: Pick,
) where
    Func: FnMut(&ArrayD<f64>) -> f64,
    Pick: FnMut(usize) -> Option<Vec<usize>>,
{
    assert_eq!(x.shape(), analytic.shape());
    let mut checked = 0usize;
    let mut attempt = 0usize;
    while checked < n_probes {
        let idx = match pick(attempt) {
            Some(idx) => idx,
            None => {
                attempt += 1;
                assert!(
                    attempt < n_probes * 200,
                    "kink filter rejected too many probe points"
                );
                continue;
            }
        };
        attempt += 1;
        let numeric = central_diff(f, x, &idx, eps);
        let a = analytic[idx.as_slice()];
        let err = relative_error(a, numeric, 1e-8);
        assert!(
            err < tol,
            "gradient mismatch at {:?}: analytic {}, numeric {}, rel err {}",
            idx,
            a,
            numeric,
            err
        );
        checked += 1;
    }
}

/// Uniformly random coordinate picker over `shape`, no kink filtering.
pub fn random_coords(
    shape: Vec<usize>,
    mut rng: rand_chacha::ChaCha8Rng,
) -> impl FnMut(usize) -> Option<Vec<usize>> {
    use rand::Rng;
    move |_| {
        Some(
            shape
                .iter()
                .map(|&n| rng.random_range(0..n))
                .collect::<Vec<_>>(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3 x1, df/dx0 at x0=2 is 4, df/dx1 is 3.
        let mut f = |x: &ArrayD<f64>| x[[0]] * x[[0]] + 3.0 * x[[1]];
        let x = arr1(&[2.0, 5.0]).into_dyn();
        let d0 = central_diff(&mut f, &x, &[0], 1e-6);
        let d1 = central_diff(&mut f, &x, &[1], 1e-6);
        assert!(relative_error(4.0, d0, 1e-8) < 1e-8);
        assert!(relative_error(3.0, d1, 1e-8) < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor_near_zero() {
        assert!(relative_error(0.0, 1e-12, 1e-8) < 1e-3);
        assert!(relative_error(1.0, 2.0, 1e-8) > 0.4);
    }
}
