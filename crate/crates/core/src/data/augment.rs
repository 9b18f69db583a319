//! Photometric augmentation: brightness, saturation and contrast jitter.
//!
//! Only pixel colors change; geometry, depth and annotations are untouched,
//! so augmented images stay consistent with their labels. Edge maps are
//! computed from unaugmented images upstream of this step.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Jitter strength; factors are drawn uniformly from `[1 - delta, 1 + delta]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { delta: 0.2 }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Applies brightness, saturation and contrast jitter in that fixed order,
/// then clamps to [0,1]. A delta of 0 returns the image unchanged.
pub fn augment_photometric(
    image: &Array3<f32>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Array3<f32> {
    let lo = 1.0 - cfg.delta;
    let hi = 1.0 + cfg.delta;
    let brightness = rng.random_range(lo..=hi) as f32;
    let saturation = rng.random_range(lo..=hi) as f32;
    let contrast = rng.random_range(lo..=hi) as f32;

    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "photometric jitter expects RGB");
    let mut out = image.clone();

    // Brightness: global gain.
    out.mapv_inplace(|v| v * brightness);

    // Saturation: blend each pixel with its own gray value.
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
            let gray = luma(r, g, b);
            out[[0, y, x]] = gray + (r - gray) * saturation;
            out[[1, y, x]] = gray + (g - gray) * saturation;
            out[[2, y, x]] = gray + (b - gray) * saturation;
        }
    }

    // Contrast: blend with the mean gray level of the whole image.
    let mut mean_gray = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            mean_gray += luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]) as f64;
        }
    }
    let mean_gray = (mean_gray / (h * w) as f64) as f32;
    out.mapv_inplace(|v| mean_gray + (v - mean_gray) * contrast);

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}
