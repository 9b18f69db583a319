//! Two-channel semantic+edge input construction.
//!
//! The semantic-branch depth network consumes a normalized class-id channel
//! and a binary Canny edge channel instead of RGB. Both are appearance-poor
//! representations, so they transfer across domains better than pixels;
//! edges are always computed on original, unaugmented, untranslated images
//! for the same reason.
//!
//! The Canny implementation is the classic pipeline: grayscale, Gaussian
//! blur, Sobel gradients, four-direction non-maximum suppression, then
//! double-threshold hysteresis with 8-connected propagation. Gradient
//! magnitudes are normalized by the maximum Sobel response on unit-range
//! images, so thresholds live on a fixed [0,1] scale.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Edge-detector settings; thresholds apply to normalized magnitudes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            low: 0.1,
            high: 0.2,
            sigma: 1.4,
        }
    }
}

/// Largest possible Sobel magnitude on a [0,1] image: |gx|,|gy| <= 4.
const SOBEL_NORM: f64 = 5.656854249492381;

/// Suppression comparisons tolerate this much absolute difference, so
/// plateau ties coming from symmetric image structures resolve the same
/// way no matter how floating-point sums were ordered upstream.
const NMS_TIE_EPS: f64 = 1e-9;

fn grayscale(image: &Array3<f32>) -> Array2<f64> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "edge detection expects RGB");
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * image[[0, y, x]] as f64
            + 0.587 * image[[1, y, x]] as f64
            + 0.114 * image[[2, y, x]] as f64
    })
}

/// Separable Gaussian blur; radius = ceil(3 sigma).
///
/// The image is replicate-padded once up front, which makes the separable
/// passes agree with a dense 2-D convolution under replication even at the
/// corners.
fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as i64)..=radius as i64 {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let (h, w) = img.dim();
    let padded = Array2::from_shape_fn((h + 2 * radius, w + 2 * radius), |(y, x)| {
        let sy = (y as i64 - radius as i64).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - radius as i64).clamp(0, w as i64 - 1) as usize;
        img[[sy, sx]]
    });
    let mut horiz = Array2::<f64>::zeros((h + 2 * radius, w));
    for y in 0..h + 2 * radius {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * padded[[y, x + ki]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * horiz[[y + ki, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Sobel gradients with replicated borders.
fn sobel(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let at = |y: i64, x: i64| {
        img[[
            y.clamp(0, h as i64 - 1) as usize,
            x.clamp(0, w as i64 - 1) as usize,
        ]]
    };
    let mut gx = Array2::<f64>::zeros((h, w));
    let mut gy = Array2::<f64>::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gxv = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gyv = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            gx[[y as usize, x as usize]] = gxv;
            gy[[y as usize, x as usize]] = gyv;
        }
    }
    (gx, gy)
}

/// Gradient direction quantized to one of four neighbor offsets `(dy, dx)`.
fn quantized_direction(gx: f64, gy: f64) -> (i64, i64) {
    let mut angle = gy.atan2(gx);
    if angle < 0.0 {
        angle += std::f64::consts::PI;
    }
    let sector = ((angle / (std::f64::consts::PI / 4.0)).round() as i64) % 4;
    match sector {
        0 => (0, 1),
        1 => (1, 1),
        2 => (1, 0),
        _ => (1, -1),
    }
}

/// Classic Canny edges; `low < high` is required.
///
/// Non-maximum suppression breaks plateau ties asymmetrically: a pixel
/// survives when it is at least as strong as its backward neighbor and
/// strictly stronger than its forward neighbor, both judged with a small
/// tolerance. A perfectly symmetric blurred step therefore yields a
/// single-pixel line, on the forward side of the plateau.
pub fn canny_edges(image: &Array3<f32>, params: &CannyParams) -> Result<Array2<bool>> {
    if !(params.low < params.high) {
        return Err(Error::Config(format!(
            "canny thresholds must satisfy low < high, got {} >= {}",
            params.low, params.high
        )));
    }
    if params.sigma <= 0.0 {
        return Err(Error::Config("canny sigma must be positive".into()));
    }
    let blurred = gaussian_blur(&grayscale(image), params.sigma);
    let (gx, gy) = sobel(&blurred);
    let (h, w) = blurred.dim();
    let mag = Array2::from_shape_fn((h, w), |(y, x)| {
        (gx[[y, x]] * gx[[y, x]] + gy[[y, x]] * gy[[y, x]]).sqrt() / SOBEL_NORM
    });

    // Non-maximum suppression along the quantized gradient direction.
    let mag_at = |y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    let mut thin = Array2::<f64>::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let m = mag[[y as usize, x as usize]];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = quantized_direction(gx[[y as usize, x as usize]], gy[[y as usize, x as usize]]);
            let back = mag_at(y - dy, x - dx);
            let fwd = mag_at(y + dy, x + dx);
            if m >= back - NMS_TIE_EPS && m > fwd + NMS_TIE_EPS {
                thin[[y as usize, x as usize]] = m;
            }
        }
    }

    // Double threshold plus 8-connected hysteresis from strong seeds.
    let mut edges = Array2::<bool>::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin[[y, x]] >= params.high && !edges[[y, x]] {
                edges[[y, x]] = true;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if !edges[[ny, nx]] && thin[[ny, nx]] >= params.low {
                                edges[[ny, nx]] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(edges)
}

/// Normalized class-id channel stacked with a binary edge channel.
///
/// Channel 0 is `class_id / num_classes` with void mapped to 1.0; channel 1
/// is the edge map as 0/1 reals.
pub fn encode_semantic_channels(
    semantic: &crate::data::SemanticMap,
    edges: &Array2<bool>,
    num_classes: usize,
) -> Result<Array3<f32>> {
    let (h, w) = semantic.class_ids.dim();
    if edges.dim() != (h, w) {
        return Err(Error::Data(format!(
            "edge dims {:?} != semantic dims {:?}",
            edges.dim(),
            semantic.class_ids.dim()
        )));
    }
    let mut out = Array3::<f32>::zeros((2, h, w));
    for ((y, x), &id) in semantic.class_ids.indexed_iter() {
        let v = if id == crate::data::SemanticMap::VOID {
            1.0
        } else if (id as usize) < num_classes {
            id as f32 / num_classes as f32
        } else {
            return Err(Error::Data(format!(
                "class id {id} at ({y},{x}) out of range for {num_classes} classes"
            )));
        };
        out[[0, y, x]] = v;
        out[[1, y, x]] = if edges[[y, x]] { 1.0 } else { 0.0 };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SemanticMap;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Textbook Canny written independently of the production code: dense
    /// 2-D convolutions, explicit angle branches, recursive flood fill.
    mod reference {
        use ndarray::{Array2, Array3};

        fn to_gray(image: &Array3<f32>) -> Array2<f64> {
            let (_, h, w) = image.dim();
            let mut g = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    g[[y, x]] = 0.299 * image[[0, y, x]] as f64
                        + 0.587 * image[[1, y, x]] as f64
                        + 0.114 * image[[2, y, x]] as f64;
                }
            }
            g
        }

        fn convolve_replicate(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
            let (h, w) = img.dim();
            let (kh, kw) = kernel.dim();
            let (ry, rx) = (kh as i64 / 2, kw as i64 / 2);
            let mut out = Array2::zeros((h, w));
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = 0.0;
                    for ky in 0..kh as i64 {
                        for kx in 0..kw as i64 {
                            let sy = (y + ky - ry).clamp(0, h as i64 - 1) as usize;
                            let sx = (x + kx - rx).clamp(0, w as i64 - 1) as usize;
                            acc += kernel[[ky as usize, kx as usize]] * img[[sy, sx]];
                        }
                    }
                    out[[y as usize, x as usize]] = acc;
                }
            }
            out
        }

        fn gaussian_kernel(sigma: f64) -> Array2<f64> {
            let r = (3.0 * sigma).ceil() as i64;
            let n = (2 * r + 1) as usize;
            let mut k = Array2::zeros((n, n));
            let mut sum = 0.0;
            for y in -r..=r {
                for x in -r..=r {
                    let v = (-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp();
                    k[[(y + r) as usize, (x + r) as usize]] = v;
                    sum += v;
                }
            }
            k.mapv_inplace(|v| v / sum);
            k
        }

        fn grow(
            y: usize,
            x: usize,
            thin: &Array2<f64>,
            low: f64,
            seen: &mut Array2<bool>,
        ) {
            seen[[y, x]] = true;
            let (h, w) = thin.dim();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !seen[[ny, nx]] && thin[[ny, nx]] >= low {
                        grow(ny, nx, thin, low, seen);
                    }
                }
            }
        }

        pub fn canny(image: &Array3<f32>, low: f64, high: f64, sigma: f64) -> Array2<bool> {
            let gray = to_gray(image);
            let blurred = convolve_replicate(&gray, &gaussian_kernel(sigma));
            let kx = ndarray::arr2(&[[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
            let ky = ndarray::arr2(&[[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
            let gx = convolve_replicate(&blurred, &kx);
            let gy = convolve_replicate(&blurred, &ky);
            let (h, w) = gray.dim();
            let norm = 32.0f64.sqrt();
            let mut mag = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    mag[[y, x]] = (gx[[y, x]].powi(2) + gy[[y, x]].powi(2)).sqrt() / norm;
                }
            }
            let get = |m: &Array2<f64>, y: i64, x: i64| {
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    0.0
                } else {
                    m[[y as usize, x as usize]]
                }
            };
            let mut thin = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let m = mag[[y, x]];
                    if m <= 0.0 {
                        continue;
                    }
                    let mut a = gy[[y, x]].atan2(gx[[y, x]]).to_degrees();
                    if a < 0.0 {
                        a += 180.0;
                    }
                    // Backward neighbor first, forward second.
                    let (b, f) = if !(22.5..157.5).contains(&a) {
                        (get(&mag, y as i64, x as i64 - 1), get(&mag, y as i64, x as i64 + 1))
                    } else if a < 67.5 {
                        (
                            get(&mag, y as i64 - 1, x as i64 - 1),
                            get(&mag, y as i64 + 1, x as i64 + 1),
                        )
                    } else if a < 112.5 {
                        (get(&mag, y as i64 - 1, x as i64), get(&mag, y as i64 + 1, x as i64))
                    } else {
                        (
                            get(&mag, y as i64 - 1, x as i64 + 1),
                            get(&mag, y as i64 + 1, x as i64 - 1),
                        )
                    };
                    if m >= b - super::NMS_TIE_EPS && m > f + super::NMS_TIE_EPS {
                        thin[[y, x]] = m;
                    }
                }
            }
            let mut seen = Array2::from_elem((h, w), false);
            for y in 0..h {
                for x in 0..w {
                    if thin[[y, x]] >= high && !seen[[y, x]] {
                        grow(y, x, &thin, low, &mut seen);
                    }
                }
            }
            seen
        }
    }

    fn gray_image(vals: &Array2<f64>) -> Array3<f32> {
        let (h, w) = vals.dim();
        Array3::from_shape_fn((3, h, w), |(_, y, x)| vals[[y, x]] as f32)
    }

    fn step_image(n: usize, vertical: bool) -> Array3<f32> {
        let vals = Array2::from_shape_fn((n, n), |(y, x)| {
            let coord = if vertical { x } else { y };
            if coord < n / 2 {
                0.0
            } else {
                1.0
            }
        });
        gray_image(&vals)
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Array3::from_elem((3, 16, 16), 0.43f32);
        let edges = canny_edges(&img, &CannyParams::default()).unwrap();
        assert!(edges.iter().all(|&e| !e));
    }

    #[test]
    fn vertical_step_yields_single_pixel_line() {
        let img = step_image(16, true);
        let edges = canny_edges(&img, &CannyParams::default()).unwrap();
        // Rows away from the border must contain exactly one edge pixel.
        for y in 3..13 {
            let count: usize = (0..16).filter(|&x| edges[[y, x]]).count();
            assert_eq!(count, 1, "row {y} has {count} edge pixels");
        }
    }

    #[test]
    fn horizontal_step_yields_single_pixel_line() {
        let img = step_image(16, false);
        let edges = canny_edges(&img, &CannyParams::default()).unwrap();
        for x in 3..13 {
            let count: usize = (0..16).filter(|&y| edges[[y, x]]).count();
            assert_eq!(count, 1, "column {x} has {count} edge pixels");
        }
    }

    #[test]
    fn matches_independent_reference_implementation() {
        let mut cases: Vec<Array3<f32>> = vec![step_image(16, true), step_image(16, false)];
        // Diagonal step and a smooth random blob round out the shapes.
        cases.push(gray_image(&Array2::from_shape_fn((16, 16), |(y, x)| {
            if x + y < 16 {
                0.1
            } else {
                0.9
            }
        })));
        let mut rng = stream_rng(31, 8);
        let coarse: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        cases.push(gray_image(&Array2::from_shape_fn((16, 16), |(y, x)| {
            coarse[(y / 4) * 4 + x / 4]
        })));

        let p = CannyParams::default();
        for (i, img) in cases.iter().enumerate() {
            let ours = canny_edges(img, &p).unwrap();
            let reference = reference::canny(img, p.low, p.high, p.sigma);
            assert_eq!(ours, reference, "case {i} diverges from the reference");
        }
    }

    #[test]
    fn repeated_calls_are_identical() {
        let img = step_image(16, true);
        let p = CannyParams::default();
        assert_eq!(canny_edges(&img, &p).unwrap(), canny_edges(&img, &p).unwrap());
    }

    #[test]
    fn degenerate_thresholds_error() {
        let img = step_image(8, true);
        for (low, high) in [(0.2, 0.2), (0.3, 0.2)] {
            let err = canny_edges(
                &img,
                &CannyParams {
                    low,
                    high,
                    sigma: 1.4,
                },
            );
            assert!(err.is_err());
        }
    }

    #[test]
    fn encode_maps_ids_and_void() {
        let sem = SemanticMap {
            class_ids: ndarray::arr2(&[[3u8, 255], [0, 9]]),
        };
        let edges = ndarray::arr2(&[[false, true], [false, false]]);
        let enc = encode_semantic_channels(&sem, &edges, 10).unwrap();
        assert!((enc[[0, 0, 0]] - 0.3).abs() < 1e-7);
        assert_eq!(enc[[0, 0, 1]], 1.0);
        assert_eq!(enc[[0, 1, 0]], 0.0);
        assert!((enc[[0, 1, 1]] - 0.9).abs() < 1e-7);
        assert_eq!(enc[[1, 0, 1]], 1.0);
        assert_eq!(enc[[1, 0, 0]], 0.0);
    }

    #[test]
    fn encode_rejects_out_of_range_ids() {
        let sem = SemanticMap {
            class_ids: ndarray::arr2(&[[10u8]]),
        };
        let edges = ndarray::arr2(&[[false]]);
        assert!(encode_semantic_channels(&sem, &edges, 10).is_err());
    }

    #[test]
    fn all_void_encodes_constant() {
        let sem = SemanticMap::all_void(4, 5);
        let edges = Array2::from_elem((4, 5), false);
        let enc = encode_semantic_channels(&sem, &edges, 7).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(enc[[0, y, x]], 1.0);
                assert_eq!(enc[[1, y, x]], 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Adding a constant shifts no gradient, so edges are unchanged as
        /// long as values stay inside [0,1].
        #[test]
        fn edges_invariant_to_constant_shift(seed in 0u64..1000, shift in 0.05f64..0.3) {
            let mut rng = stream_rng(seed, 9);
            let coarse: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..0.6)).collect();
            let base = Array2::from_shape_fn((12, 12), |(y, x)| coarse[(y / 3) * 4 + x / 3]);
            let shifted = base.mapv(|v| v + shift);
            let p = CannyParams::default();
            let e1 = canny_edges(&gray_image(&base), &p).unwrap();
            let e2 = canny_edges(&gray_image(&shifted), &p).unwrap();
            prop_assert_eq!(e1, e2);
        }

        /// Distinct class ids map to distinct channel values for fixed C.
        #[test]
        fn encode_is_injective_on_ids(a in 0u8..7, b in 0u8..7) {
            let sem = SemanticMap { class_ids: ndarray::arr2(&[[a, b]]) };
            let edges = Array2::from_elem((1, 2), false);
            let enc = encode_semantic_channels(&sem, &edges, 7).unwrap();
            if a != b {
                prop_assert_ne!(enc[[0, 0, 0]], enc[[0, 0, 1]]);
            } else {
                prop_assert_eq!(enc[[0, 0, 0]], enc[[0, 0, 1]]);
            }
        }

        /// Re-binarizing the edge channel reproduces it exactly.
        #[test]
        fn edge_channel_is_idempotent_under_rebinarization(seed in 0u64..1000) {
            let mut rng = stream_rng(seed, 10);
            let edges = Array2::from_shape_fn((6, 6), |_| rng.random_bool(0.3));
            let sem = SemanticMap { class_ids: Array2::from_elem((6, 6), 2u8) };
            let enc = encode_semantic_channels(&sem, &edges, 7).unwrap();
            let rebin = Array2::from_shape_fn((6, 6), |(y, x)| enc[[1, y, x]] >= 0.5);
            prop_assert_eq!(rebin, edges);
        }
    }
}
