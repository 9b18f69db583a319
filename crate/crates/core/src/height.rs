//! Instance-height prior: feature extraction, the height predictor, and
//! the two instance losses.
//!
//! On source data, ground-truth object heights come out of the pinhole
//! relation h = H * D / fy applied to the median masked depth, and the
//! predictor learns them directly. On target data, predicted heights are
//! projected back into pseudo depths D = fy * h / H, and the loss anchors
//! the depth network to them through a learnable scale that absorbs any
//! global mismatch, for example from a misdeclared target focal length.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::data::{CameraIntrinsics, DepthMap, InstanceAnnotation};
use crate::nn::layers::{
    relu, relu_backward, softplus, softplus_backward, Init, Linear, LinearCache,
};
use crate::nn::{Gradients, Params, Scalar};
use crate::{Error, Result};

/// Side length of the fixed mask-shape grid fed to the predictor.
pub const MASK_PATCH: usize = 16;
/// Instances shorter than this many pixels carry little height signal.
pub const MIN_PIXEL_HEIGHT: u32 = 4;
/// Instances with fewer mask pixels than this are dropped as noise.
pub const MIN_MASK_AREA: usize = 8;
/// Pseudo depths are clamped into the shared working depth range.
pub const PSEUDO_DEPTH_MIN: f64 = crate::DEPTH_MIN_M;
pub const PSEUDO_DEPTH_MAX: f64 = crate::DEPTH_MAX_M;

/// Shape and class description of one detected instance.
///
/// All entries lie in [0,1]; exactly one one-hot entry is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeatures {
    pub bbox_w_norm: f64,
    pub bbox_h_norm: f64,
    /// Bbox crop of the mask resampled to a 16x16 binary grid, row-major.
    pub mask_patch: Vec<f64>,
    pub class_onehot: Vec<f64>,
}

impl InstanceFeatures {
    pub fn input_dim(num_classes: usize) -> usize {
        2 + MASK_PATCH * MASK_PATCH + num_classes
    }

    fn write_row<F: Scalar>(&self, mut row: ndarray::ArrayViewMut1<F>) {
        row[0] = F::from_f64(self.bbox_w_norm);
        row[1] = F::from_f64(self.bbox_h_norm);
        for (i, &v) in self.mask_patch.iter().enumerate() {
            row[2 + i] = F::from_f64(v);
        }
        for (i, &v) in self.class_onehot.iter().enumerate() {
            row[2 + MASK_PATCH * MASK_PATCH + i] = F::from_f64(v);
        }
    }
}

/// Builds predictor features from an instance annotation.
///
/// The mask is cropped to its bounding box and resampled by nearest
/// neighbor, so the patch describes object shape independent of image
/// position and scale.
pub fn extract_features(
    instance: &InstanceAnnotation,
    img_h: usize,
    img_w: usize,
    num_classes: usize,
) -> Result<InstanceFeatures> {
    let [bx, by, bw, bh] = instance.bbox;
    if (instance.class_id as usize) >= num_classes {
        return Err(Error::Data(format!(
            "instance {} has class id {} but only {num_classes} classes exist",
            instance.instance_id, instance.class_id
        )));
    }
    let mut mask_patch = vec![0.0; MASK_PATCH * MASK_PATCH];
    for py in 0..MASK_PATCH {
        let sy = by as usize + ((py as f64 + 0.5) * bh as f64 / MASK_PATCH as f64) as usize;
        for px in 0..MASK_PATCH {
            let sx = bx as usize + ((px as f64 + 0.5) * bw as f64 / MASK_PATCH as f64) as usize;
            if instance.mask[[sy.min(img_h - 1), sx.min(img_w - 1)]] {
                mask_patch[py * MASK_PATCH + px] = 1.0;
            }
        }
    }
    let mut class_onehot = vec![0.0; num_classes];
    class_onehot[instance.class_id as usize] = 1.0;
    Ok(InstanceFeatures {
        bbox_w_norm: bw as f64 / img_w as f64,
        bbox_h_norm: bh as f64 / img_h as f64,
        mask_patch,
        class_onehot,
    })
}

/// Whether an instance is large enough for the height losses.
pub fn usable_for_height(instance: &InstanceAnnotation) -> bool {
    instance.pixel_height() >= MIN_PIXEL_HEIGHT
        && instance.mask.iter().filter(|&&m| m).count() >= MIN_MASK_AREA
}

/// Fully-connected height predictor: input -> 128 -> 64 -> softplus scalar.
pub struct HeightPredictor {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    num_classes: usize,
}

/// Forward state for [`HeightPredictor::backward`].
pub struct HeightPredictorCache<F> {
    c1: LinearCache<F>,
    r1: Array2<F>,
    c2: LinearCache<F>,
    r2: Array2<F>,
    c3: LinearCache<F>,
    sp_factor: Array2<F>,
}

impl HeightPredictor {
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut impl Rng,
        num_classes: usize,
    ) -> Self {
        let d = InstanceFeatures::input_dim(num_classes);
        HeightPredictor {
            fc1: Linear::new(params, rng, "height.fc1", d, 128, Init::He),
            fc2: Linear::new(params, rng, "height.fc2", 128, 64, Init::He),
            fc3: Linear::new(params, rng, "height.fc3", 64, 1, Init::He),
            num_classes,
        }
    }

    /// Predicted heights in meters, one per feature row; always positive.
    pub fn forward<F: Scalar>(
        &self,
        params: &Params<F>,
        features: &[InstanceFeatures],
    ) -> (Array1<F>, HeightPredictorCache<F>) {
        let d = InstanceFeatures::input_dim(self.num_classes);
        let mut x = Array2::<F>::zeros((features.len(), d));
        for (i, f) in features.iter().enumerate() {
            assert_eq!(f.class_onehot.len(), self.num_classes);
            f.write_row(x.row_mut(i));
        }
        let (a1, c1) = self.fc1.forward(params, &x);
        let r1 = relu(&a1);
        let (a2, c2) = self.fc2.forward(params, &r1);
        let r2 = relu(&a2);
        let (a3, c3) = self.fc3.forward(params, &r2);
        let (h, sp_factor) = softplus(&a3);
        let heights = h.column(0).to_owned();
        (
            heights,
            HeightPredictorCache {
                c1,
                r1,
                c2,
                r2,
                c3,
                sp_factor,
            },
        )
    }

    /// Accumulates parameter gradients for per-instance height gradients.
    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &HeightPredictorCache<F>,
        d_heights: &Array1<F>,
        grads: &mut Gradients<F>,
    ) {
        let n = d_heights.len();
        let gy = Array2::from_shape_fn((n, 1), |(i, _)| d_heights[i]);
        let g3 = softplus_backward(&cache.sp_factor, &gy);
        let g2 = self.fc3.backward(params, &cache.c3, &g3, grads);
        let g2 = relu_backward(&cache.r2, &g2);
        let g1 = self.fc2.backward(params, &cache.c2, &g2, grads);
        let g1 = relu_backward(&cache.r1, &g1);
        self.fc1.backward(params, &cache.c1, &g1, grads);
    }
}

/// Median ground-truth depth under a mask, in meters.
///
/// Only valid depth pixels count; an even count takes the mean of the two
/// middle values. Fails when the mask covers no valid pixel, so callers
/// can drop the instance.
pub fn instance_depth_from_gt(mask: &Array2<bool>, depth: &DepthMap) -> Result<f64> {
    assert_eq!(mask.dim(), depth.values.dim());
    let mut vals: Vec<f64> = Vec::new();
    ndarray::Zip::from(mask)
        .and(&depth.values)
        .and(&depth.valid_mask)
        .for_each(|&m, &d, &v| {
            if m && v {
                vals.push(d as f64);
            }
        });
    if vals.is_empty() {
        return Err(Error::Data(
            "instance has no valid depth evidence under its mask".into(),
        ));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    Ok(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

/// Physical instance height h = H * median_depth / fy, in meters.
pub fn gt_height(
    instance: &InstanceAnnotation,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
) -> Result<f64> {
    let d = instance_depth_from_gt(&instance.mask, depth)?;
    Ok(instance.pixel_height() as f64 * d / intrinsics.fy)
}

/// Mean absolute height error over instances; empty input reports a skip.
pub fn height_loss_source<F: Scalar>(h_hat: &[F], h_gt: &[F]) -> (F, Vec<F>, bool) {
    assert_eq!(h_hat.len(), h_gt.len());
    if h_hat.is_empty() {
        return (F::zero(), Vec::new(), true);
    }
    let inv_n = F::from_f64(1.0 / h_hat.len() as f64);
    let mut sum = F::zero();
    let mut grads = Vec::with_capacity(h_hat.len());
    for (&h, &g) in h_hat.iter().zip(h_gt) {
        let r = h - g;
        sum = sum + r.abs();
        grads.push(sgn(r) * inv_n);
    }
    (sum * inv_n, grads, false)
}

/// Pseudo depth fy * h / H clamped to the working range, with its
/// derivative in h (zero where the clamp is active).
pub fn pseudo_depth<F: Scalar>(fy_target: f64, h_hat: F, pixel_height: f64) -> (F, F) {
    assert!(pixel_height >= 1.0, "pixel height must be at least 1");
    let slope = F::from_f64(fy_target / pixel_height);
    let raw = slope * h_hat;
    let lo = F::from_f64(PSEUDO_DEPTH_MIN);
    let hi = F::from_f64(PSEUDO_DEPTH_MAX);
    if raw < lo {
        (lo, F::zero())
    } else if raw > hi {
        (hi, F::zero())
    } else {
        (raw, slope)
    }
}

/// One mask plus its pseudo depth, ready for the target-domain loss.
pub struct TargetInstance<'a, F> {
    pub mask: &'a Array2<bool>,
    pub pseudo_depth: F,
}

/// Value and gradients of the scaled target-domain instance loss.
pub struct TargetInstanceLoss<F> {
    pub value: F,
    pub d_pred: Array3<F>,
    pub d_phi: F,
    /// Per-instance derivative in its pseudo depth, for routing into the
    /// height predictor when the class has no source supervision.
    pub d_pseudo: Vec<F>,
    pub mask_pixels: usize,
    pub empty: bool,
}

/// Scaled anchor loss (phi / p) * sum_i sum_{px in M_i} |D_i/phi - pred|.
///
/// `p` counts mask pixels over all instances. Gradients cover the depth
/// prediction, the scale phi, and each pseudo depth; with no mask pixels
/// the loss is zero and flagged.
pub fn instance_loss_target<F: Scalar>(
    instances: &[TargetInstance<F>],
    pred: &Array3<F>,
    phi: F,
) -> TargetInstanceLoss<F> {
    let p: usize = instances
        .iter()
        .map(|t| t.mask.iter().filter(|&&m| m).count())
        .sum();
    if p == 0 {
        return TargetInstanceLoss {
            value: F::zero(),
            d_pred: Array3::zeros(pred.dim()),
            d_phi: F::zero(),
            d_pseudo: vec![F::zero(); instances.len()],
            mask_pixels: 0,
            empty: true,
        };
    }
    let inv_p = F::from_f64(1.0 / p as f64);
    let mut abs_sum = F::zero();
    let mut d_pred = Array3::<F>::zeros(pred.dim());
    let mut d_phi_sum = F::zero();
    let mut d_pseudo = Vec::with_capacity(instances.len());
    for t in instances {
        let anchor = t.pseudo_depth / phi;
        let mut sgn_sum = F::zero();
        for ((y, x), &m) in t.mask.indexed_iter() {
            if !m {
                continue;
            }
            let r = anchor - pred[[0, y, x]];
            let s = sgn(r);
            abs_sum = abs_sum + r.abs();
            sgn_sum = sgn_sum + s;
            // d/d pred of (phi/p) |anchor - pred| = -(phi/p) sgn(r).
            d_pred[[0, y, x]] = d_pred[[0, y, x]] - phi * inv_p * s;
            d_phi_sum = d_phi_sum + r.abs() - s * anchor;
        }
        // d/d pseudo: (phi/p) * sgn(r) * (1/phi) summed over the mask.
        d_pseudo.push(sgn_sum * inv_p);
    }
    TargetInstanceLoss {
        value: phi * inv_p * abs_sum,
        d_pred,
        d_phi: d_phi_sum * inv_p,
        d_pseudo,
        mask_pixels: p,
        empty: false,
    }
}

/// Positive scale from its unconstrained parameterization.
pub fn scale_from_rho<F: Scalar>(rho: F) -> F {
    rho.exp()
}

/// Chains a gradient in phi back to the unconstrained parameter.
pub fn rho_grad<F: Scalar>(phi: F, d_phi: F) -> F {
    phi * d_phi
}

fn sgn<F: Scalar>(r: F) -> F {
    if r > F::zero() {
        F::one()
    } else if r < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
