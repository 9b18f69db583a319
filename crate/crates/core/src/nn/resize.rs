//! Spatial resampling and channel stacking with exact adjoints.
//!
//! The backward functions are true adjoints of their forward maps, so
//! gradient flow through resampling is exact rather than approximated.

use ndarray::{Array3, ArrayView3, Axis};

use super::Scalar;

/// Nearest-neighbor upsampling by a factor of 2.
pub fn upsample_nearest2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[[ci, iy, ix]];
                y[[ci, 2 * iy, 2 * ix]] = v;
                y[[ci, 2 * iy, 2 * ix + 1]] = v;
                y[[ci, 2 * iy + 1, 2 * ix]] = v;
                y[[ci, 2 * iy + 1, 2 * ix + 1]] = v;
            }
        }
    }
    y
}

/// Adjoint of [`upsample_nearest2`]: sums each 2x2 block.
pub fn upsample_nearest2_backward<F: Scalar>(gy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                gx[[ci, iy, ix]] = gy[[ci, 2 * iy, 2 * ix]]
                    + gy[[ci, 2 * iy, 2 * ix + 1]]
                    + gy[[ci, 2 * iy + 1, 2 * ix]]
                    + gy[[ci, 2 * iy + 1, 2 * ix + 1]];
            }
        }
    }
    gx
}

/// Source taps and weights of one output position under half-pixel-center
/// bilinear sampling with edge clamping.
#[inline]
fn bilinear_taps(o: usize, scale: f64, in_n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * scale - 0.5;
    let s = s.max(0.0);
    let i0 = (s.floor() as usize).min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    let t = (s - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, t)
}

/// Bilinear resampling to `(out_h, out_w)`, half-pixel centers, clamped edges.
pub fn bilinear_resize<F: Scalar>(x: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut y = Array3::<F>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, ty) = bilinear_taps(oy, sy, h);
        let wy0 = F::from_f64(1.0 - ty);
        let wy1 = F::from_f64(ty);
        for ox in 0..out_w {
            let (x0, x1, tx) = bilinear_taps(ox, sx, w);
            let wx0 = F::from_f64(1.0 - tx);
            let wx1 = F::from_f64(tx);
            for ci in 0..c {
                y[[ci, oy, ox]] = wy0 * (wx0 * x[[ci, y0, x0]] + wx1 * x[[ci, y0, x1]])
                    + wy1 * (wx0 * x[[ci, y1, x0]] + wx1 * x[[ci, y1, x1]]);
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_resize`] back to an `(c, in_h, in_w)` input.
pub fn bilinear_resize_backward<F: Scalar>(
    gy: &Array3<F>,
    in_h: usize,
    in_w: usize,
) -> Array3<F> {
    let (c, out_h, out_w) = gy.dim();
    if in_h == out_h && in_w == out_w {
        return gy.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut gx = Array3::<F>::zeros((c, in_h, in_w));
    for oy in 0..out_h {
        let (y0, y1, ty) = bilinear_taps(oy, sy, in_h);
        let wy0 = F::from_f64(1.0 - ty);
        let wy1 = F::from_f64(ty);
        for ox in 0..out_w {
            let (x0, x1, tx) = bilinear_taps(ox, sx, in_w);
            let wx0 = F::from_f64(1.0 - tx);
            let wx1 = F::from_f64(tx);
            for ci in 0..c {
                let g = gy[[ci, oy, ox]];
                gx[[ci, y0, x0]] = gx[[ci, y0, x0]] + wy0 * wx0 * g;
                gx[[ci, y0, x1]] = gx[[ci, y0, x1]] + wy0 * wx1 * g;
                gx[[ci, y1, x0]] = gx[[ci, y1, x0]] + wy1 * wx0 * g;
                gx[[ci, y1, x1]] = gx[[ci, y1, x1]] + wy1 * wx1 * g;
            }
        }
    }
    gx
}

/// Stacks feature maps along the channel axis.
pub fn concat_channels<F: Scalar>(parts: &[ArrayView3<F>]) -> Array3<F> {
    let views: Vec<_> = parts.to_vec();
    ndarray::concatenate(Axis(0), &views).expect("parts must share spatial dims")
}

/// Splits a channel-axis gradient back into per-part gradients.
pub fn split_channels<F: Scalar>(g: &Array3<F>, sizes: &[usize]) -> Vec<Array3<F>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(
            g.slice(ndarray::s![at..at + n, .., ..])
                .to_owned(),
        );
        at += n;
    }
    assert_eq!(at, g.dim().0, "sizes must cover all channels");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random3(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0..1.0))
    }

    fn dot(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        (a * b).sum()
    }

    #[test]
    fn nearest_upsample_repeats_blocks() {
        let x = ndarray::arr3(&[[[1.0, 2.0], [3.0, 4.0]]]);
        let y = upsample_nearest2(&x);
        assert_eq!(y.dim(), (1, 4, 4));
        assert_eq!(y[[0, 0, 0]], 1.0);
        assert_eq!(y[[0, 0, 1]], 1.0);
        assert_eq!(y[[0, 1, 1]], 1.0);
        assert_eq!(y[[0, 3, 3]], 4.0);
        assert_eq!(y[[0, 2, 1]], 3.0);
    }

    #[test]
    fn nearest_upsample_backward_is_adjoint() {
        let mut rng = stream_rng(21, 1);
        let x = random3(&mut rng, 3, 5, 7);
        let y = random3(&mut rng, 3, 10, 14);
        let lhs = dot(&upsample_nearest2(&x), &y);
        let rhs = dot(&x, &upsample_nearest2_backward(&y));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let mut rng = stream_rng(22, 2);
        let x = Array3::from_elem((2, 6, 9), 3.25f64);
        let y = bilinear_resize(&x, 13, 5);
        assert!(y.iter().all(|v| (v - 3.25).abs() < 1e-12));

        let x = random3(&mut rng, 2, 6, 9);
        let same = bilinear_resize(&x, 6, 9);
        assert_eq!(same, x);
    }

    #[test]
    fn bilinear_exact_doubling_interpolates_midpoints() {
        // One row, two pixels: centers at src 0 and 1; output centers map to
        // src -0.25, 0.25, 0.75, 1.25 -> clamped ends, interior interpolated.
        let x = ndarray::arr3(&[[[0.0f64, 4.0]]]);
        let y = bilinear_resize(&x, 1, 4);
        assert!((y[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((y[[0, 0, 1]] - 1.0).abs() < 1e-12);
        assert!((y[[0, 0, 2]] - 3.0).abs() < 1e-12);
        assert!((y[[0, 0, 3]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = stream_rng(23, 3);
        for &(ih, iw, oh, ow) in &[(4usize, 6usize, 8usize, 12usize), (8, 12, 3, 5), (5, 5, 9, 4)] {
            let x = random3(&mut rng, 2, ih, iw);
            let y = random3(&mut rng, 2, oh, ow);
            let lhs = dot(&bilinear_resize(&x, oh, ow), &y);
            let rhs = dot(&x, &bilinear_resize_backward(&y, ih, iw));
            assert!((lhs - rhs).abs() < 1e-10, "case {ih}x{iw} -> {oh}x{ow}");
        }
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut rng = stream_rng(24, 4);
        let a = random3(&mut rng, 2, 4, 5);
        let b = random3(&mut rng, 3, 4, 5);
        let cat = concat_channels(&[a.view(), b.view()]);
        assert_eq!(cat.dim(), (5, 4, 5));
        let parts = split_channels(&cat, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
