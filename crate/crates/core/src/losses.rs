//! Loss terms and the weighted total-loss combiner.
//!
//! Every loss returns its scalar value together with analytic gradients
//! with respect to the network outputs it consumes; the trainer chains
//! those gradients through the network backward passes. Losses over
//! ground-truth depth respect the validity mask; an empty mask yields a
//! zero loss and reports the skip to the caller instead of failing.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::nn::resize::{bilinear_resize, bilinear_resize_backward};
use crate::nn::Scalar;
use crate::{Error, Result};

/// Term weights for the combined training objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_source: f64,
    pub lambda_target: f64,
    pub lambda_smooth: f64,
    pub lambda_identity: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_source: 50.0,
            lambda_target: 1.0,
            lambda_smooth: 0.01,
            lambda_identity: 100.0,
            lambda_gan: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_source", self.lambda_source),
            ("lambda_target", self.lambda_target),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_identity", self.lambda_identity),
            ("lambda_gan", self.lambda_gan),
        ];
        let bad: Vec<String> = all
            .iter()
            .filter(|(_, v)| !v.is_finite() || *v < 0.0)
            .map(|(name, v)| format!("{name}={v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be nonnegative finite numbers, got {}",
                bad.join(", ")
            )))
        }
    }
}

/// Per-iteration scalar record of every term, serialized to the loss log.
///
/// `gan_disc` belongs to the discriminator's own optimization step and is
/// never part of `total`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub depth_sup: f64,
    pub con_source: f64,
    pub con_target: f64,
    pub inst_source: f64,
    pub inst_target: f64,
    pub smooth: f64,
    pub idt: f64,
    pub gan_gen: f64,
    pub gan_disc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name and value of each term, for divergence diagnostics.
    pub fn terms(&self) -> [(&'static str, f64); 10] {
        [
            ("depth_sup", self.depth_sup),
            ("con_source", self.con_source),
            ("con_target", self.con_target),
            ("inst_source", self.inst_source),
            ("inst_target", self.inst_target),
            ("smooth", self.smooth),
            ("idt", self.idt),
            ("gan_gen", self.gan_gen),
            ("gan_disc", self.gan_disc),
            ("total", self.total),
        ]
    }
}

/// Weighted combination of all generator-side terms.
pub fn total_loss(parts: &LossBreakdown, w: &LossWeights) -> f64 {
    w.lambda_source * (parts.depth_sup + parts.con_source + parts.inst_source)
        + w.lambda_target * (parts.con_target + parts.inst_target)
        + w.lambda_smooth * parts.smooth
        + w.lambda_identity * parts.idt
        + w.lambda_gan * parts.gan_gen
}

/// L1 subgradient that is zero exactly at zero residual.
fn sgn<F: Scalar>(r: F) -> F {
    if r > F::zero() {
        F::one()
    } else if r < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Multiscale supervised depth loss against valid ground-truth pixels.
///
/// Each scale's prediction is bilinearly upsampled to the ground-truth
/// resolution, the absolute residual is averaged over valid pixels, and
/// scales contribute with equal weight. Returns the gradients at each
/// scale's native resolution, plus whether the mask was empty.
pub fn depth_supervision_loss<F: Scalar>(
    preds: &[Array3<F>],
    gt: &Array2<F>,
    valid: &Array2<bool>,
) -> (F, Vec<Array3<F>>, bool) {
    let (h, w) = gt.dim();
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        let zeros = preds
            .iter()
            .map(|p| Array3::zeros(p.dim()))
            .collect::<Vec<_>>();
        return (F::zero(), zeros, true);
    }
    let scale_w = F::from_f64(1.0 / preds.len() as f64);
    let inv_n = F::from_f64(1.0 / n_valid as f64);
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(preds.len());
    for pred in preds {
        let up = bilinear_resize(pred, h, w);
        let mut scale_sum = F::zero();
        let mut g_full = Array3::<F>::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                if valid[[y, x]] {
                    let r = up[[0, y, x]] - gt[[y, x]];
                    scale_sum = scale_sum + r.abs();
                    g_full[[0, y, x]] = sgn(r) * inv_n * scale_w;
                }
            }
        }
        value = value + scale_sum * inv_n * scale_w;
        let (_, ph, pw) = pred.dim();
        grads.push(bilinear_resize_backward(&g_full, ph, pw));
    }
    (value, grads, false)
}

/// Mean absolute error of the semantic-branch prediction against valid
/// ground-truth depth.
pub fn consistency_source<F: Scalar>(
    pred: &Array3<F>,
    gt: &Array2<F>,
    valid: &Array2<bool>,
) -> (F, Array3<F>, bool) {
    let (_, h, w) = pred.dim();
    assert_eq!((h, w), gt.dim(), "prediction and ground truth must align");
    let n_valid = valid.iter().filter(|&&v| v).count();
    let mut grad = Array3::<F>::zeros(pred.dim());
    if n_valid == 0 {
        return (F::zero(), grad, true);
    }
    let inv_n = F::from_f64(1.0 / n_valid as f64);
    let mut sum = F::zero();
    for y in 0..h {
        for x in 0..w {
            if valid[[y, x]] {
                let r = pred[[0, y, x]] - gt[[y, x]];
                sum = sum + r.abs();
                grad[[0, y, x]] = sgn(r) * inv_n;
            }
        }
    }
    (sum * inv_n, grad, false)
}

/// Mean absolute difference between the two branches' full-resolution
/// predictions, over all pixels; gradients flow into both branches.
pub fn consistency_target<F: Scalar>(
    depth_pred: &Array3<F>,
    semantic_pred: &Array3<F>,
) -> (F, Array3<F>, Array3<F>) {
    assert_eq!(depth_pred.dim(), semantic_pred.dim());
    let n = depth_pred.len();
    let inv_n = F::from_f64(1.0 / n as f64);
    let mut sum = F::zero();
    let mut g_depth = Array3::<F>::zeros(depth_pred.dim());
    ndarray::Zip::indexed(depth_pred)
        .and(semantic_pred)
        .for_each(|idx, &a, &b| {
            let r = a - b;
            sum = sum + r.abs();
            g_depth[idx] = sgn(r) * inv_n;
        });
    let g_semantic = g_depth.mapv(|g| -g);
    (sum * inv_n, g_depth, g_semantic)
}

/// Mean absolute difference between a translated target image and the
/// original, over all pixels and channels; the gradient targets the
/// translator output.
pub fn identity_loss<F: Scalar>(translated: &Array3<F>, original: &Array3<F>) -> (F, Array3<F>) {
    assert_eq!(translated.dim(), original.dim());
    let inv_n = F::from_f64(1.0 / translated.len() as f64);
    let mut sum = F::zero();
    let mut grad = Array3::<F>::zeros(translated.dim());
    ndarray::Zip::indexed(translated)
        .and(original)
        .for_each(|idx, &t, &o| {
            let r = t - o;
            sum = sum + r.abs();
            grad[idx] = sgn(r) * inv_n;
        });
    (sum * inv_n, grad)
}

/// Least-squares adversarial values and their gradients.
pub struct GanLosses<F: Scalar> {
    pub generator: F,
    pub discriminator: F,
    /// d generator-loss / d disc-scores-on-translated.
    pub grad_gen_translated: Array3<F>,
    /// d discriminator-loss / d disc-scores-on-target.
    pub grad_disc_target: Array3<F>,
    /// d discriminator-loss / d disc-scores-on-translated.
    pub grad_disc_translated: Array3<F>,
}

/// Least-squares adversarial terms on patch discriminator scores.
///
/// Generator: mean (s_translated - 1)^2. Discriminator: half the mean of
/// (s_target - 1)^2 plus half the mean of s_translated^2.
pub fn gan_losses<F: Scalar>(
    disc_on_translated: &Array3<F>,
    disc_on_target: &Array3<F>,
) -> GanLosses<F> {
    let one = F::one();
    let two = F::from_f64(2.0);
    let half = F::from_f64(0.5);
    let inv_tr = F::from_f64(1.0 / disc_on_translated.len() as f64);
    let inv_tg = F::from_f64(1.0 / disc_on_target.len() as f64);

    let mut gen = F::zero();
    let mut disc_tr = F::zero();
    let mut grad_gen_translated = Array3::<F>::zeros(disc_on_translated.dim());
    let mut grad_disc_translated = Array3::<F>::zeros(disc_on_translated.dim());
    ndarray::Zip::indexed(disc_on_translated).for_each(|idx, &s| {
        gen = gen + (s - one) * (s - one);
        disc_tr = disc_tr + s * s;
        grad_gen_translated[idx] = two * (s - one) * inv_tr;
        grad_disc_translated[idx] = s * inv_tr;
    });

    let mut disc_tg = F::zero();
    let mut grad_disc_target = Array3::<F>::zeros(disc_on_target.dim());
    ndarray::Zip::indexed(disc_on_target).for_each(|idx, &s| {
        disc_tg = disc_tg + (s - one) * (s - one);
        grad_disc_target[idx] = (s - one) * inv_tg;
    });

    GanLosses {
        generator: gen * inv_tr,
        discriminator: half * (disc_tg * inv_tg + disc_tr * inv_tr),
        grad_gen_translated,
        grad_disc_target,
        grad_disc_translated,
    }
}

/// Edge-aware first-order smoothness on mean-normalized depth.
///
/// With d* = d / mean(d), penalizes |∂x d*| weighted by exp(-|∂x I|) plus
/// the same along y, image gradients averaged over channels; each
/// direction is averaged over its own difference positions. The mean
/// normalization makes the value invariant to scaling the depth map by a
/// positive constant.
pub fn smoothness_loss<F: Scalar>(pred: &Array3<F>, image: &Array3<F>) -> (F, Array3<F>) {
    let (_, h, w) = pred.dim();
    let (ic, ih, iw) = image.dim();
    assert_eq!((ih, iw), (h, w), "depth and image sizes must match");
    let n = (h * w) as f64;
    let mu: F = pred.iter().fold(F::zero(), |a, &v| a + v) * F::from_f64(1.0 / n);
    assert!(mu > F::zero(), "smoothness expects positive depth");
    let inv_mu = F::one() / mu;

    let img_grad = |y: usize, x: usize, dy: usize, dx: usize| -> F {
        let mut acc = F::zero();
        for c in 0..ic {
            acc = acc + (image[[c, y + dy, x + dx]] - image[[c, y, x]]).abs();
        }
        (-(acc * F::from_f64(1.0 / ic as f64))).exp()
    };

    let nx = (h * (w - 1)).max(1) as f64;
    let ny = ((h - 1) * w).max(1) as f64;
    let inv_nx = F::from_f64(1.0 / nx);
    let inv_ny = F::from_f64(1.0 / ny);

    // value = (weighted L1 of raw differences) / mu; the gradient adds the
    // chain through mu because every pixel shifts the normalizer.
    let mut raw = F::zero();
    let mut g_raw = Array3::<F>::zeros(pred.dim());
    if w > 1 {
        for y in 0..h {
            for x in 0..w - 1 {
                let d = pred[[0, y, x + 1]] - pred[[0, y, x]];
                let wt = img_grad(y, x, 0, 1) * inv_nx;
                raw = raw + d.abs() * wt;
                let s = sgn(d) * wt;
                g_raw[[0, y, x + 1]] = g_raw[[0, y, x + 1]] + s;
                g_raw[[0, y, x]] = g_raw[[0, y, x]] - s;
            }
        }
    }
    if h > 1 {
        for y in 0..h - 1 {
            for x in 0..w {
                let d = pred[[0, y + 1, x]] - pred[[0, y, x]];
                let wt = img_grad(y, x, 1, 0) * inv_ny;
                raw = raw + d.abs() * wt;
                let s = sgn(d) * wt;
                g_raw[[0, y + 1, x]] = g_raw[[0, y + 1, x]] + s;
                g_raw[[0, y, x]] = g_raw[[0, y, x]] - s;
            }
        }
    }
    let value = raw * inv_mu;
    let mu_term = value * inv_mu * F::from_f64(1.0 / n);
    let grad = g_raw.mapv(|g| g * inv_mu - mu_term);
    (value, grad)
}
