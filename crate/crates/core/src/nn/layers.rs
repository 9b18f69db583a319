//! Convolution, normalization, linear and activation layers.
//!
//! Convolution lowers each window into a column matrix (im2col) and runs a
//! single matrix product per sample; the backward pass reuses the cached
//! column matrix for the weight gradient and scatters the column gradient
//! back to the input (col2im).

use ndarray::{Array1, Array2, Array3, ArrayD, Dimension, Ix1, Ix2, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, ParamRef, Params, Scalar};

/// Weight initialization family for a layer.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`, for rectified stacks.
    He,
    /// Zero-mean normal with a fixed std, the translation-GAN convention.
    Normal(f64),
}

fn sample_weights<F: Scalar>(
    rng: &mut impl Rng,
    shape: &[usize],
    init: Init,
    fan_in: usize,
) -> ArrayD<F> {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Normal(s) => s,
    };
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || F::from_f64(dist.sample(rng)))
}

/// 2D convolution over one channel-height-width sample.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Forward state needed by [`Conv2d::backward`].
pub struct Conv2dCache<F> {
    cols: Array2<F>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            sample_weights(rng, &[out_c, in_c, k, k], init, in_c * k * k),
        );
        let b = bias.then(|| params.add(format!("{name}.b"), ArrayD::zeros(vec![out_c])));
        Conv2d {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, Conv2dCache<F>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "channel mismatch");
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        let w_mat = params
            .get(self.w)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
            .unwrap();
        let mut y_mat = w_mat.dot(&cols);
        if let Some(b) = self.b {
            let bias = params.get(b).view().into_dimensionality::<Ix1>().unwrap();
            for (mut row, &bv) in y_mat.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let y = y_mat
            .into_shape_with_order((self.out_c, oh, ow))
            .unwrap();
        (
            y,
            Conv2dCache {
                cols,
                in_h: h,
                in_w: w,
            },
        )
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &Conv2dCache<F>,
        gy: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let (oc, oh, ow) = gy.dim();
        assert_eq!(oc, self.out_c);
        let gy_mat = gy.view().into_shape_with_order((oc, oh * ow)).unwrap();
        let gw = gy_mat
            .dot(&cache.cols.t())
            .into_shape_with_order(vec![self.out_c, self.in_c, self.k, self.k])
            .unwrap();
        grads.accumulate(self.w, &gw);
        if let Some(b) = self.b {
            let gb = gy_mat.sum_axis(ndarray::Axis(1)).into_dyn();
            grads.accumulate(b, &gb);
        }
        let w_mat = params
            .get(self.w)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
            .unwrap();
        let gcols = w_mat.t().dot(&gy_mat);
        col2im(
            &gcols,
            self.in_c,
            cache.in_h,
            cache.in_w,
            self.k,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }
}

/// Lowers conv windows to a `(in_c * k * k, oh * ow)` matrix. Out-of-image
/// taps stay zero, which realizes zero padding.
fn im2col<F: Scalar>(
    x: &Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("input must be standard layout");
    let mut cols = Array2::<F>::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = ci * h * w + iy as usize * w;
                    let dst_base = row_base + oy * ow;
                    if stride == 1 {
                        // ix = ox + kx - pad must lie in [0, w)
                        let lo = pad.saturating_sub(kx);
                        let hi = ow.min((w + pad).saturating_sub(kx));
                        if lo >= hi {
                            continue;
                        }
                        let src_off = lo + kx - pad;
                        cs[dst_base + lo..dst_base + hi].copy_from_slice(
                            &xs[src_base + src_off..src_base + src_off + (hi - lo)],
                        );
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst_base + ox] = xs[src_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to input pixels.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<F> {
    let gs = gcols.as_slice().expect("gcols must be standard layout");
    let mut gx = Array3::<F>::zeros((c, h, w));
    let xs = gx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_base = row_base + oy * ow;
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = ow.min((w + pad).saturating_sub(kx));
                        if lo >= hi {
                            continue;
                        }
                        let dst_off = lo + kx - pad;
                        for j in 0..hi - lo {
                            xs[dst_base + dst_off + j] =
                                xs[dst_base + dst_off + j] + gs[src_base + lo + j];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[dst_base + ix as usize] =
                                xs[dst_base + ix as usize] + gs[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Per-channel normalization over spatial positions with learnable scale
/// and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub channels: usize,
    pub eps: f64,
}

/// Forward state needed by [`InstanceNorm::backward`].
pub struct InstanceNormCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
}

impl InstanceNorm {
    pub fn new<F: Scalar>(params: &mut Params<F>, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), ArrayD::from_elem(vec![channels], F::one()));
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(vec![channels]));
        InstanceNorm {
            gamma,
            beta,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, InstanceNormCache<F>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let n = F::from_f64((h * w) as f64);
        let eps = F::from_f64(self.eps);
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mut xhat = x.clone();
        let mut inv_std = Array1::<F>::zeros(c);
        for (ci, mut plane) in xhat.outer_iter_mut().enumerate() {
            let mu = plane.sum() / n;
            let mut var = F::zero();
            for &v in plane.iter() {
                let d = v - mu;
                var = var + d * d;
            }
            var = var / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[ci] = is;
            plane.mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.outer_iter_mut().enumerate() {
            let g = gamma[[ci]];
            let b = beta[[ci]];
            plane.mapv_inplace(|v| g * v + b);
        }
        (y, InstanceNormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &InstanceNormCache<F>,
        gy: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let (c, h, w) = gy.dim();
        let n = F::from_f64((h * w) as f64);
        let gamma = params.get(self.gamma);
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut gx = Array3::<F>::zeros((c, h, w));
        for ci in 0..c {
            let xhat = cache.xhat.index_axis(ndarray::Axis(0), ci);
            let gyc = gy.index_axis(ndarray::Axis(0), ci);
            let mut sum_gy = F::zero();
            let mut sum_gy_xhat = F::zero();
            for (&g, &xh) in gyc.iter().zip(xhat.iter()) {
                sum_gy = sum_gy + g;
                sum_gy_xhat = sum_gy_xhat + g * xh;
            }
            dbeta[ci] = sum_gy;
            dgamma[ci] = sum_gy_xhat;
            let g = gamma[[ci]];
            let scale = g * cache.inv_std[ci] / n;
            let mut gxc = gx.index_axis_mut(ndarray::Axis(0), ci);
            ndarray::Zip::from(&mut gxc)
                .and(&gyc)
                .and(&xhat)
                .for_each(|o, &gyv, &xh| {
                    *o = scale * (n * gyv - sum_gy - xh * sum_gy_xhat);
                });
        }
        grads.accumulate(self.gamma, &dgamma.into_dyn());
        grads.accumulate(self.beta, &dbeta.into_dyn());
        gx
    }
}

/// Fully connected layer over `(batch, features)` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
    pub in_f: usize,
    pub out_f: usize,
}

/// Forward state needed by [`Linear::backward`].
pub struct LinearCache<F> {
    x: Array2<F>,
}

impl Linear {
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut impl Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
        init: Init,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            sample_weights(rng, &[out_f, in_f], init, in_f),
        );
        let b = params.add(format!("{name}.b"), ArrayD::zeros(vec![out_f]));
        Linear { w, b, in_f, out_f }
    }

    pub fn forward<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LinearCache<F>) {
        assert_eq!(x.ncols(), self.in_f);
        let w = params
            .get(self.w)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let b = params
            .get(self.b)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row += &b;
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &LinearCache<F>,
        gy: &Array2<F>,
        grads: &mut Gradients<F>,
    ) -> Array2<F> {
        let w = params
            .get(self.w)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let gw = gy.t().dot(&cache.x);
        grads.accumulate(self.w, &gw.into_dyn());
        let gb = gy.sum_axis(ndarray::Axis(0));
        grads.accumulate(self.b, &gb.into_dyn());
        gy.dot(&w)
    }
}

/// `max(0, x)`.
pub fn relu<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward through [`relu`] given its output.
pub fn relu_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| {
        if yv <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

/// `x` for positive inputs, `slope * x` otherwise.
pub fn leaky_relu<F: Scalar, D: Dimension>(
    x: &ndarray::Array<F, D>,
    slope: f64,
) -> ndarray::Array<F, D> {
    let s = F::from_f64(slope);
    x.mapv(|v| if v > F::zero() { v } else { s * v })
}

/// Backward through [`leaky_relu`] given its output. Requires `slope > 0`
/// so the output sign identifies the input sign.
pub fn leaky_relu_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gy: &ndarray::Array<F, D>,
    slope: f64,
) -> ndarray::Array<F, D> {
    let s = F::from_f64(slope);
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| {
        if yv <= F::zero() {
            *g = *g * s;
        }
    });
    gx
}

/// Logistic function `1 / (1 + exp(-x))`.
pub fn sigmoid<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Backward through [`sigmoid`] given its output.
pub fn sigmoid_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx)
        .and(y)
        .for_each(|g, &yv| *g = *g * yv * (F::one() - yv));
    gx
}

/// Hyperbolic tangent.
pub fn tanh<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v.tanh())
}

/// Backward through [`tanh`] given its output.
pub fn tanh_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    gy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx)
        .and(y)
        .for_each(|g, &yv| *g = *g * (F::one() - yv * yv));
    gx
}

/// Numerically stable `ln(1 + exp(x))`; returns the output and the logistic
/// factor needed by the backward pass.
pub fn softplus<F: Scalar, D: Dimension>(
    x: &ndarray::Array<F, D>,
) -> (ndarray::Array<F, D>, ndarray::Array<F, D>) {
    let y = x.mapv(|v| {
        let a = if v > F::zero() { v } else { F::zero() };
        a + (-v.abs()).exp().ln_1p()
    });
    let s = sigmoid(x);
    (y, s)
}

/// Backward through [`softplus`] given the cached logistic factor.
pub fn softplus_backward<F: Scalar, D: Dimension>(
    s: &ndarray::Array<F, D>,
    gy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx)
        .and(s)
        .for_each(|g, &sv| *g = *g * sv);
    gx
}
