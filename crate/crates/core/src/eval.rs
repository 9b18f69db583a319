//! Depth evaluation: per-image error metrics with median scaling and
//! depth caps, dataset-level aggregation, report artifacts, and depth
//! colorization.
//!
//! Pipeline per image: upsample the prediction to ground-truth size,
//! build the evaluation mask (valid ground truth within the cap, and
//! optionally a fixed border crop), median-scale if enabled, clamp the
//! prediction to the cap range, then accumulate the seven standard
//! metrics. A dataset report is the unweighted mean over images that
//! produced a non-empty mask.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::io::{atomic_write, atomic_write_json};
use crate::data::DepthMap;
use crate::nn::resize::bilinear_resize;
use crate::{Error, Result};

/// Default lower bound on usable ground-truth depth in meters.
pub const MIN_DEPTH_DEFAULT: f64 = 1e-3;

/// Border crop fractions (top, bottom, left, right) applied to the
/// evaluation mask when [`EvalSettings::eval_crop`] is set. Intended
/// for real captures where the image border carries no usable depth.
pub const CROP_FRACTIONS: [f64; 4] = [0.408_108_11, 0.991_891_89, 0.035_947_71, 0.964_052_29];

/// Ground-truth depth range restriction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthCap {
    /// Evaluate where `min_depth < g <= 80`.
    Cap80,
    /// Evaluate where `1 <= g <= 50`.
    Band1To50,
}

impl DepthCap {
    /// Range predictions are clamped to before metric computation.
    pub fn clamp_range(self, min_depth: f64) -> (f64, f64) {
        match self {
            DepthCap::Cap80 => (min_depth, 80.0),
            DepthCap::Band1To50 => (1.0, 50.0),
        }
    }

    fn admits(self, g: f64, min_depth: f64) -> bool {
        match self {
            DepthCap::Cap80 => g > min_depth && g <= 80.0,
            DepthCap::Band1To50 => (1.0..=50.0).contains(&g),
        }
    }
}

/// Evaluation protocol switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub cap: DepthCap,
    pub median_scaling: bool,
    pub min_depth: f64,
    /// Restrict the mask to the fixed border crop window.
    pub eval_crop: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            cap: DepthCap::Cap80,
            median_scaling: true,
            min_depth: MIN_DEPTH_DEFAULT,
            eval_crop: false,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth.is_finite()) {
            return Err(Error::Config(format!(
                "min_depth must be positive and finite, got {}",
                self.min_depth
            )));
        }
        Ok(())
    }
}

/// The seven standard depth metrics for one image.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    /// Median-scaling ratio applied to the prediction (1 when disabled).
    pub ratio: f64,
}

/// Dataset-level aggregate: unweighted mean of per-image metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub settings: EvalSettings,
    pub n_images: usize,
    pub n_pixels: usize,
    /// Images dropped because their evaluation mask was empty.
    pub n_skipped: usize,
}

/// One evaluated image in dataset order.
#[derive(Debug, Clone)]
pub struct PerImageRecord {
    pub id: String,
    pub metrics: ImageMetrics,
}

/// Aggregate report plus the per-image rows behind it.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub per_image: Vec<PerImageRecord>,
}

/// Median with the even-count convention of averaging the middle two.
fn median_of(vals: &mut [f64]) -> f64 {
    assert!(!vals.is_empty());
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Rescales `pred` by `median(gt)/median(pred)` over masked pixels.
///
/// Returns the scaled prediction and the ratio, or `None` when the mask
/// is empty (the caller skips the image and counts it).
pub fn median_scale(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    mask: &Array2<bool>,
) -> Option<(Array2<f64>, f64)> {
    assert_eq!(pred.dim(), gt.dim());
    assert_eq!(pred.dim(), mask.dim());
    let mut ps = Vec::new();
    let mut gs = Vec::new();
    ndarray::Zip::from(pred).and(gt).and(mask).for_each(|&p, &g, &m| {
        if m {
            ps.push(p);
            gs.push(g);
        }
    });
    if ps.is_empty() {
        return None;
    }
    let ratio = median_of(&mut gs) / median_of(&mut ps);
    Some((pred.mapv(|p| p * ratio), ratio))
}

/// Evaluation mask: valid ground truth within the cap, optionally
/// restricted to the border crop window.
fn eval_mask(gt: &DepthMap, settings: &EvalSettings) -> Array2<bool> {
    let (h, w) = gt.values.dim();
    let mut mask = Array2::from_elem((h, w), false);
    ndarray::Zip::indexed(&mut mask)
        .and(&gt.values)
        .and(&gt.valid_mask)
        .for_each(|(y, x), m, &g, &v| {
            let mut keep = v && settings.cap.admits(g as f64, settings.min_depth);
            if settings.eval_crop {
                let [t, b, l, r] = CROP_FRACTIONS;
                keep &= y >= (t * h as f64) as usize
                    && y < (b * h as f64) as usize
                    && x >= (l * w as f64) as usize
                    && x < (r * w as f64) as usize;
            }
            *m = keep;
        });
    mask
}

/// Computes the seven metrics for one image, or `None` when the
/// evaluation mask is empty.
///
/// The prediction may be at a coarser resolution; it is bilinearly
/// upsampled to the ground-truth size before masking.
pub fn compute_metrics(
    pred: &Array2<f64>,
    gt: &DepthMap,
    settings: &EvalSettings,
) -> Option<ImageMetrics> {
    let (gh, gw) = gt.values.dim();
    let pred_full = if pred.dim() == (gh, gw) {
        pred.clone()
    } else {
        let stacked = pred.clone().insert_axis(Axis(0));
        bilinear_resize(&stacked, gh, gw).index_axis(Axis(0), 0).to_owned()
    };

    let mask = eval_mask(gt, settings);
    let gt64 = gt.values.mapv(|g| g as f64);
    let (scaled, ratio) = if settings.median_scaling {
        median_scale(&pred_full, &gt64, &mask)?
    } else {
        if !mask.iter().any(|&m| m) {
            return None;
        }
        (pred_full, 1.0)
    };

    let (lo, hi) = settings.cap.clamp_range(settings.min_depth);
    let mut n = 0usize;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut d1 = 0usize;
    let mut d2 = 0usize;
    let mut d3 = 0usize;
    ndarray::Zip::from(&scaled).and(&gt64).and(&mask).for_each(|&p, &g, &m| {
        if !m {
            return;
        }
        let p = p.clamp(lo, hi);
        n += 1;
        abs_rel += (p - g).abs() / g;
        sq_rel += (p - g) * (p - g) / g;
        sq += (p - g) * (p - g);
        sq_log += (p.ln() - g.ln()).powi(2);
        let thresh = (p / g).max(g / p);
        if thresh < 1.25 {
            d1 += 1;
        }
        if thresh < 1.25f64.powi(2) {
            d2 += 1;
        }
        if thresh < 1.25f64.powi(3) {
            d3 += 1;
        }
    });
    let inv_n = 1.0 / n as f64;
    Some(ImageMetrics {
        abs_rel: abs_rel * inv_n,
        sq_rel: sq_rel * inv_n,
        rmse: (sq * inv_n).sqrt(),
        rmse_log: (sq_log * inv_n).sqrt(),
        delta1: d1 as f64 * inv_n,
        delta2: d2 as f64 * inv_n,
        delta3: d3 as f64 * inv_n,
        n_pixels: n,
        ratio,
    })
}

/// Unweighted mean of per-image metrics. Errors when nothing survived.
pub fn aggregate(
    per_image: &[PerImageRecord],
    n_skipped: usize,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Data(
            "no evaluable images: every evaluation mask was empty".into(),
        ));
    }
    let inv = 1.0 / per_image.len() as f64;
    let mut sum = [0.0f64; 7];
    let mut n_pixels = 0usize;
    for r in per_image {
        let m = &r.metrics;
        for (acc, v) in sum.iter_mut().zip([
            m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3,
        ]) {
            *acc += v;
        }
        n_pixels += m.n_pixels;
    }
    Ok(MetricsReport {
        abs_rel: sum[0] * inv,
        sq_rel: sum[1] * inv,
        rmse: sum[2] * inv,
        rmse_log: sum[3] * inv,
        delta1: sum[4] * inv,
        delta2: sum[5] * inv,
        delta3: sum[6] * inv,
        settings: *settings,
        n_images: per_image.len(),
        n_pixels,
        n_skipped,
    })
}

/// Evaluates a stream of `(id, prediction, ground truth)` items.
pub fn evaluate_pairs<I>(items: I, settings: &EvalSettings) -> Result<EvalOutcome>
where
    I: IntoIterator<Item = (String, Array2<f64>, DepthMap)>,
{
    settings.validate()?;
    let mut per_image = Vec::new();
    let mut n_skipped = 0usize;
    for (id, pred, gt) in items {
        match compute_metrics(&pred, &gt, settings) {
            Some(metrics) => per_image.push(PerImageRecord { id, metrics }),
            None => n_skipped += 1,
        }
    }
    let report = aggregate(&per_image, n_skipped, settings)?;
    Ok(EvalOutcome { report, per_image })
}

const COLUMNS: [&str; 7] = [
    "abs_rel", "sq_rel", "rmse", "rmse_log", "delta<1.25", "delta<1.25^2", "delta<1.25^3",
];

/// Fixed-width text table with one aggregate row.
pub fn render_table(report: &MetricsReport) -> String {
    let values = [
        report.abs_rel,
        report.sq_rel,
        report.rmse,
        report.rmse_log,
        report.delta1,
        report.delta2,
        report.delta3,
    ];
    let mut out = String::new();
    for name in COLUMNS {
        write!(out, "{name:>14}").unwrap();
    }
    out.push('\n');
    for v in values {
        write!(out, "{v:>14.4}").unwrap();
    }
    out.push('\n');
    write!(
        out,
        "images {}  pixels {}  skipped {}  cap {:?}  median_scaling {}  crop {}\n",
        report.n_images,
        report.n_pixels,
        report.n_skipped,
        report.settings.cap,
        report.settings.median_scaling,
        report.settings.eval_crop,
    )
    .unwrap();
    out
}

fn per_image_csv(outcome: &EvalOutcome) -> String {
    let mut out = String::from(
        "id,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,n_pixels,ratio\n",
    );
    for r in &outcome.per_image {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.id,
            m.abs_rel,
            m.sq_rel,
            m.rmse,
            m.rmse_log,
            m.delta1,
            m.delta2,
            m.delta3,
            m.n_pixels,
            m.ratio
        )
        .unwrap();
    }
    out
}

/// Writes `report.json`, `report.txt`, and `per_image.csv` into `dir`.
pub fn write_report_files(dir: &Path, outcome: &EvalOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write_json(&dir.join("report.json"), &outcome.report)?;
    atomic_write(&dir.join("report.txt"), render_table(&outcome.report).as_bytes())?;
    atomic_write(&dir.join("per_image.csv"), per_image_csv(outcome).as_bytes())?;
    Ok(())
}

/// Perceptually ordered colormap anchors, dark-to-bright, sampled
/// uniformly on [0, 1].
const COLORMAP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [72, 40, 120],
    [62, 74, 137],
    [49, 104, 142],
    [38, 130, 142],
    [31, 158, 137],
    [53, 183, 121],
    [109, 205, 89],
    [253, 231, 37],
];

fn colormap_at(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t as usize).min(COLORMAP.len() - 2);
    let f = t - i as f64;
    let a = COLORMAP[i];
    let b = COLORMAP[i + 1];
    std::array::from_fn(|k| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8)
}

/// Renders a depth map as an 8-bit RGB image.
///
/// Color tracks inverse depth clamped to `range = (near, far)`: near
/// depths are bright, far depths dark, invalid pixels black.
pub fn colorize_depth(
    depth: &Array2<f64>,
    valid: &Array2<bool>,
    range: (f64, f64),
) -> image::RgbImage {
    assert_eq!(depth.dim(), valid.dim());
    let (near, far) = range;
    assert!(near > 0.0 && far > near);
    let (inv_near, inv_far) = (1.0 / near, 1.0 / far);
    let (h, w) = depth.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &d) in depth.indexed_iter() {
        let px = if valid[[y, x]] {
            let t = (1.0 / d.clamp(near, far) - inv_far) / (inv_near - inv_far);
            colormap_at(t)
        } else {
            [0, 0, 0]
        };
        img.put_pixel(x as u32, y as u32, image::Rgb(px));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::arr2;
    use rand::Rng;

    fn map(values: Array2<f64>, valid: Array2<bool>) -> DepthMap {
        DepthMap {
            values: values.mapv(|v| v as f32),
            valid_mask: valid,
        }
    }

    fn all_valid(values: Array2<f64>) -> DepthMap {
        let valid = Array2::from_elem(values.dim(), true);
        map(values, valid)
    }

    /// Naive scalar re-implementation over flat pixel lists, used as an
    /// independent cross-check of the array pipeline.
    fn oracle(pred: &Array2<f64>, gt: &DepthMap, s: &EvalSettings) -> Option<ImageMetrics> {
        let (h, w) = gt.values.dim();
        assert_eq!(pred.dim(), (h, w));
        let [tf, bf, lf, rf] = CROP_FRACTIONS;
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let g = gt.values[[y, x]] as f64;
                if !gt.valid_mask[[y, x]] {
                    continue;
                }
                let in_cap = match s.cap {
                    DepthCap::Cap80 => g > s.min_depth && g <= 80.0,
                    DepthCap::Band1To50 => g >= 1.0 && g <= 50.0,
                };
                if !in_cap {
                    continue;
                }
                if s.eval_crop {
                    let ok = y >= (tf * h as f64) as usize
                        && y < (bf * h as f64) as usize
                        && x >= (lf * w as f64) as usize
                        && x < (rf * w as f64) as usize;
                    if !ok {
                        continue;
                    }
                }
                pairs.push((pred[[y, x]], g));
            }
        }
        if pairs.is_empty() {
            return None;
        }
        let ratio = if s.median_scaling {
            let mut ps: Vec<f64> = pairs.iter().map(|&(p, _)| p).collect();
            let mut gs: Vec<f64> = pairs.iter().map(|&(_, g)| g).collect();
            median_of(&mut gs) / median_of(&mut ps)
        } else {
            1.0
        };
        let (lo, hi) = match s.cap {
            DepthCap::Cap80 => (s.min_depth, 80.0),
            DepthCap::Band1To50 => (1.0, 50.0),
        };
        let n = pairs.len() as f64;
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
        for &(p0, g) in &pairs {
            let p = (p0 * ratio).clamp(lo, hi);
            a += (p - g).abs() / g;
            b += (p - g) * (p - g) / g;
            c += (p - g) * (p - g);
            d += (p.ln() - g.ln()) * (p.ln() - g.ln());
            let t = (p / g).max(g / p);
            if t < 1.25 {
                d1 += 1.0;
            }
            if t < 1.5625 {
                d2 += 1.0;
            }
            if t < 1.953125 {
                d3 += 1.0;
            }
        }
        Some(ImageMetrics {
            abs_rel: a / n,
            sq_rel: b / n,
            rmse: (c / n).sqrt(),
            rmse_log: (d / n).sqrt(),
            delta1: d1 / n,
            delta2: d2 / n,
            delta3: d3 / n,
            n_pixels: pairs.len(),
            ratio,
        })
    }

    fn assert_close(a: &ImageMetrics, b: &ImageMetrics, tol: f64) {
        assert!((a.abs_rel - b.abs_rel).abs() <= tol, "abs_rel {} vs {}", a.abs_rel, b.abs_rel);
        assert!((a.sq_rel - b.sq_rel).abs() <= tol, "sq_rel {} vs {}", a.sq_rel, b.sq_rel);
        assert!((a.rmse - b.rmse).abs() <= tol, "rmse {} vs {}", a.rmse, b.rmse);
        assert!((a.rmse_log - b.rmse_log).abs() <= tol);
        assert!((a.delta1 - b.delta1).abs() <= tol);
        assert!((a.delta2 - b.delta2).abs() <= tol);
        assert!((a.delta3 - b.delta3).abs() <= tol);
        assert_eq!(a.n_pixels, b.n_pixels);
    }

    #[test]
    fn matches_scalar_oracle_on_random_cases() {
        let mut rng = stream_rng(41, 7);
        let mut evaluated = 0;
        for case in 0..100 {
            let pred = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.2..95.0));
            let values = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.0..95.0f64));
            let valid = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.0..1.0) < 0.8);
            let gt = map(values, valid);
            let settings = EvalSettings {
                cap: if case % 2 == 0 { DepthCap::Cap80 } else { DepthCap::Band1To50 },
                median_scaling: case % 3 != 0,
                min_depth: 1e-3,
                eval_crop: case % 5 == 0,
            };
            let got = compute_metrics(&pred, &gt, &settings);
            let want = oracle(&pred, &gt, &settings);
            match (got, want) {
                (Some(g), Some(w)) => {
                    assert_close(&g, &w, 1e-10);
                    assert!(g.delta1 <= g.delta2 && g.delta2 <= g.delta3);
                    evaluated += 1;
                }
                (None, None) => {}
                (g, w) => panic!("skip disagreement: {:?} vs {:?}", g.is_some(), w.is_some()),
            }
        }
        assert!(evaluated > 80, "too few evaluable cases: {evaluated}");
    }

    #[test]
    fn identity_prediction_scores_perfectly() {
        let gt = all_valid(arr2(&[[2.0, 5.0], [10.0, 40.0]]));
        let pred = gt.values.mapv(|v| v as f64);
        let m = compute_metrics(&pred, &gt, &EvalSettings::default()).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.sq_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.rmse_log, 0.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert_eq!(m.ratio, 1.0);
    }

    #[test]
    fn uniform_ratio_just_under_first_threshold() {
        let gt = all_valid(arr2(&[[2.0, 5.0], [10.0, 40.0]]));
        let pred = gt.values.mapv(|v| 1.2 * v as f64);
        let s = EvalSettings { median_scaling: false, ..Default::default() };
        let m = compute_metrics(&pred, &gt, &s).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_pixel_hand_case() {
        let gt = all_valid(arr2(&[[2.0, 4.0]]));
        let pred = arr2(&[[1.0, 8.0]]);
        let s = EvalSettings { median_scaling: false, ..Default::default() };
        let m = compute_metrics(&pred, &gt, &s).unwrap();
        assert!((m.abs_rel - 0.75).abs() < 1e-12);
        assert!((m.sq_rel - 2.25).abs() < 1e-12);
        assert!((m.rmse - 8.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn median_scale_examples() {
        let gt = arr2(&[[2.0, 4.0], [6.0, 8.0]]);
        let pred = gt.mapv(|g| 2.0 * g);
        let mask = Array2::from_elem((2, 2), true);
        let (scaled, ratio) = median_scale(&pred, &gt, &mask).unwrap();
        assert_eq!(ratio, 0.5);
        assert_eq!(scaled, gt);

        let (_, r1) = median_scale(&gt, &gt, &mask).unwrap();
        assert_eq!(r1, 1.0);

        let pred = arr2(&[[1.0, 2.0, 100.0]]);
        let gt = arr2(&[[2.0, 4.0, 6.0]]);
        let mask = Array2::from_elem((1, 3), true);
        let (_, ratio) = median_scale(&pred, &gt, &mask).unwrap();
        assert_eq!(ratio, 2.0);

        let none = median_scale(&pred, &gt, &Array2::from_elem((1, 3), false));
        assert!(none.is_none());
    }

    #[test]
    fn scaling_all_predictions_leaves_metrics_unchanged() {
        let mut rng = stream_rng(42, 8);
        let pred = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.5..60.0));
        let values = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0.5..60.0f64));
        let gt = all_valid(values);
        let s = EvalSettings::default();
        let base = compute_metrics(&pred, &gt, &s).unwrap();

        // Power-of-two factors scale every intermediate exactly, so the
        // ratio absorbs them bit for bit.
        for c in [0.25, 0.5, 2.0, 4.0, 1024.0] {
            let m = compute_metrics(&pred.mapv(|p| c * p), &gt, &s).unwrap();
            assert_eq!(m.abs_rel, base.abs_rel, "c={c}");
            assert_eq!(m.sq_rel, base.sq_rel, "c={c}");
            assert_eq!(m.rmse, base.rmse, "c={c}");
            assert_eq!(m.rmse_log, base.rmse_log, "c={c}");
            assert_eq!((m.delta1, m.delta2, m.delta3), (base.delta1, base.delta2, base.delta3));
        }
        // Arbitrary factors round once per multiply; invariance holds to
        // rounding noise.
        for c in [3.0, 7.5] {
            let m = compute_metrics(&pred.mapv(|p| c * p), &gt, &s).unwrap();
            assert!((m.abs_rel - base.abs_rel).abs() < 1e-12);
            assert!((m.rmse - base.rmse).abs() < 1e-10);
        }
    }

    #[test]
    fn coarse_prediction_is_upsampled_before_masking() {
        let mut rng = stream_rng(43, 9);
        let coarse = Array2::from_shape_simple_fn((4, 4), || rng.random_range(1.0..40.0));
        let values = Array2::from_shape_simple_fn((8, 8), || rng.random_range(1.0..40.0f64));
        let gt = all_valid(values);
        let s = EvalSettings::default();
        let direct = compute_metrics(&coarse, &gt, &s).unwrap();
        let stacked = coarse.clone().insert_axis(Axis(0));
        let up = bilinear_resize(&stacked, 8, 8).index_axis(Axis(0), 0).to_owned();
        let manual = compute_metrics(&up, &gt, &s).unwrap();
        assert_close(&direct, &manual, 0.0);
    }

    #[test]
    fn cap_band_excludes_out_of_range_ground_truth() {
        let gt = all_valid(arr2(&[[0.5, 2.0], [60.0, 30.0]]));
        let pred = arr2(&[[0.5, 2.0], [60.0, 30.0]]);
        let s = EvalSettings {
            cap: DepthCap::Band1To50,
            median_scaling: false,
            ..Default::default()
        };
        let m = compute_metrics(&pred, &gt, &s).unwrap();
        // 0.5 and 60 fall outside the band; the two survivors match GT.
        assert_eq!(m.n_pixels, 2);
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn prediction_clamped_to_cap_range() {
        let gt = all_valid(arr2(&[[79.0]]));
        let pred = arr2(&[[200.0]]);
        let s = EvalSettings { median_scaling: false, ..Default::default() };
        let m = compute_metrics(&pred, &gt, &s).unwrap();
        assert!((m.abs_rel - 1.0 / 79.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_unweighted_mean_and_errors_when_empty() {
        let s = EvalSettings::default();
        let gt_a = all_valid(arr2(&[[2.0, 4.0]]));
        let gt_b = all_valid(arr2(&[[10.0, 20.0, 30.0]]));
        let items = vec![
            ("a".to_string(), arr2(&[[2.0, 4.0]]), gt_a.clone()),
            ("b".to_string(), arr2(&[[11.0, 19.0, 33.0]]), gt_b),
            // All-invalid image is skipped, not averaged.
            (
                "c".to_string(),
                arr2(&[[5.0]]),
                map(arr2(&[[5.0]]), arr2(&[[false]])),
            ),
        ];
        let out = evaluate_pairs(items, &s).unwrap();
        assert_eq!(out.report.n_images, 2);
        assert_eq!(out.report.n_skipped, 1);
        assert_eq!(out.report.n_pixels, 5);
        let mean = 0.5 * (out.per_image[0].metrics.abs_rel + out.per_image[1].metrics.abs_rel);
        assert_eq!(out.report.abs_rel, mean);

        let empty = evaluate_pairs(
            vec![("x".to_string(), arr2(&[[5.0]]), map(arr2(&[[5.0]]), arr2(&[[false]])))],
            &s,
        );
        assert!(empty.is_err());

        // Duplicating an image leaves the aggregate unchanged.
        let gt_a2 = all_valid(arr2(&[[2.0, 4.0]]));
        let twice = evaluate_pairs(
            vec![
                ("a".to_string(), arr2(&[[2.0, 4.0]]), gt_a.clone()),
                ("a2".to_string(), arr2(&[[2.0, 4.0]]), gt_a2),
            ],
            &s,
        )
        .unwrap();
        let once = evaluate_pairs(vec![("a".to_string(), arr2(&[[2.0, 4.0]]), gt_a)], &s).unwrap();
        assert_eq!(twice.report.abs_rel, once.report.abs_rel);
        assert_eq!(twice.report.rmse, once.report.rmse);
    }

    #[test]
    fn report_files_round_trip() {
        let s = EvalSettings::default();
        let gt = all_valid(arr2(&[[2.0, 4.0], [6.0, 8.0]]));
        let out = evaluate_pairs(
            vec![("img0".to_string(), arr2(&[[2.1, 3.9], [6.2, 7.8]]), gt)],
            &s,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("eval-report-{}", std::process::id()));
        write_report_files(&dir, &out).unwrap();

        let json = std::fs::read_to_string(dir.join("report.json")).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.abs_rel, out.report.abs_rel);
        assert_eq!(back.n_images, 1);

        let table = std::fs::read_to_string(dir.join("report.txt")).unwrap();
        for col in COLUMNS {
            assert!(table.contains(col), "missing column {col}");
        }
        let order_ok = table.find("abs_rel").unwrap() < table.find("sq_rel").unwrap()
            && table.find("sq_rel").unwrap() < table.find("rmse").unwrap()
            && table.find("rmse_log").unwrap() < table.find("delta<1.25").unwrap();
        assert!(order_ok);

        let csv = std::fs::read_to_string(dir.join("per_image.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("img0,"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validates_min_depth() {
        let s = EvalSettings { min_depth: 0.0, ..Default::default() };
        assert!(s.validate().is_err());
        let s = EvalSettings { min_depth: f64::NAN, ..Default::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn crop_restricts_mask_rows_and_columns() {
        // On 8x8 the crop window is rows 3..7, cols 0..7.
        let values = Array2::from_elem((8, 8), 10.0);
        let gt = all_valid(values);
        let pred = Array2::from_elem((8, 8), 10.0);
        let s = EvalSettings { eval_crop: true, median_scaling: false, ..Default::default() };
        let m = compute_metrics(&pred, &gt, &s).unwrap();
        assert_eq!(m.n_pixels, 4 * 7);
    }

    #[test]
    fn colorize_endpoints_order_and_invalid() {
        let depth = arr2(&[[0.5, 0.5], [80.0, 5.0]]);
        let valid = arr2(&[[true, false], [true, true]]);
        let img = colorize_depth(&depth, &valid, (0.5, 80.0));
        // Near endpoint takes the bright end, far endpoint the dark end.
        assert_eq!(img.get_pixel(0, 0).0, [253, 231, 37]);
        assert_eq!(img.get_pixel(0, 1).0, [68, 1, 84]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);

        // Constant depth renders a constant color.
        let flat = Array2::from_elem((3, 3), 7.0);
        let v = Array2::from_elem((3, 3), true);
        let im2 = colorize_depth(&flat, &v, (0.5, 80.0));
        let first = *im2.get_pixel(0, 0);
        assert!(im2.pixels().all(|p| *p == first));

        // Out-of-range depths clamp to the endpoints.
        let wild = arr2(&[[0.01, 500.0]]);
        let v = Array2::from_elem((1, 2), true);
        let im3 = colorize_depth(&wild, &v, (0.5, 80.0));
        assert_eq!(im3.get_pixel(0, 0).0, [253, 231, 37]);
        assert_eq!(im3.get_pixel(1, 0).0, [68, 1, 84]);
    }

    #[test]
    fn colormap_green_channel_tracks_inverse_depth_monotonically() {
        let depths: Vec<f64> = (0..40).map(|i| 0.5 + i as f64 * 2.0).collect();
        let row = Array2::from_shape_vec((1, 40), depths).unwrap();
        let valid = Array2::from_elem((1, 40), true);
        let img = colorize_depth(&row, &valid, (0.5, 80.0));
        let greens: Vec<u8> = (0..40).map(|x| img.get_pixel(x, 0).0[1]).collect();
        for w in greens.windows(2) {
            assert!(w[1] <= w[0], "greens not monotone: {greens:?}");
        }
    }
}
