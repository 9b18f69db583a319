//! Residual image-to-image translator with a bounded output.
//!
//! Downsample twice, run residual blocks at quarter resolution, upsample
//! back, and squash the final features through a scaled tanh so outputs
//! stay in [0,1] like the inputs. No cycle consistency is involved; an
//! identity loss and the adversarial game shape the mapping.

use ndarray::Array3;
use rand::Rng;

use super::{NormedConv, NormedConvCache};
use crate::nn::layers::{
    tanh, tanh_backward, Conv2d, Conv2dCache, Init, InstanceNorm, InstanceNormCache,
};
use crate::nn::resize::{upsample_nearest2, upsample_nearest2_backward};
use crate::nn::{Gradients, Params, Scalar};
use crate::{Error, Result};

/// Residual block: x + norm(conv(relu-normed-conv(x))).
struct ResBlock {
    a: NormedConv,
    b_conv: Conv2d,
    b_norm: InstanceNorm,
}

struct ResBlockCache<F> {
    a: NormedConvCache<F>,
    b_conv: Conv2dCache<F>,
    b_norm: InstanceNormCache<F>,
}

impl ResBlock {
    fn new<F: Scalar>(params: &mut Params<F>, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        ResBlock {
            a: NormedConv::new(params, rng, &format!("{name}.a"), ch, ch, 3, 1, 1, Init::Normal(0.02)),
            b_conv: Conv2d::new(params, rng, &format!("{name}.b"), ch, ch, 3, 1, 1, false, Init::Normal(0.02)),
            b_norm: InstanceNorm::new(params, &format!("{name}.b.norm"), ch),
        }
    }

    fn forward<F: Scalar>(&self, params: &Params<F>, x: &Array3<F>) -> (Array3<F>, ResBlockCache<F>) {
        let (y, ca) = self.a.forward(params, x);
        let (y, cb) = self.b_conv.forward(params, &y);
        let (y, cn) = self.b_norm.forward(params, &y);
        (
            x + &y,
            ResBlockCache {
                a: ca,
                b_conv: cb,
                b_norm: cn,
            },
        )
    }

    fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &ResBlockCache<F>,
        gy: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let g = self.b_norm.backward(params, &cache.b_norm, gy, grads);
        let g = self.b_conv.backward(params, &cache.b_conv, &g, grads);
        let g = self.a.backward(params, &cache.a, &g, grads);
        gy + &g
    }
}

/// Source-to-target appearance translator, 3 -> 3 channels.
pub struct Translator {
    stem: NormedConv,
    down1: NormedConv,
    down2: NormedConv,
    res: Vec<ResBlock>,
    up1: NormedConv,
    up2: NormedConv,
    out: Conv2d,
}

pub struct TranslatorCache<F> {
    stem: NormedConvCache<F>,
    down1: NormedConvCache<F>,
    down2: NormedConvCache<F>,
    res: Vec<ResBlockCache<F>>,
    up1: NormedConvCache<F>,
    up2: NormedConvCache<F>,
    out: Conv2dCache<F>,
    /// Cached tanh output for the bounded-output backward pass.
    th: Array3<F>,
}

impl Translator {
    pub fn new<F: Scalar>(params: &mut Params<F>, rng: &mut impl Rng, name: &str, base: usize) -> Self {
        let b = base;
        let init = Init::Normal(0.02);
        Translator {
            stem: NormedConv::new(params, rng, &format!("{name}.stem"), 3, b, 7, 1, 3, init),
            down1: NormedConv::new(params, rng, &format!("{name}.down1"), b, 2 * b, 3, 2, 1, init),
            down2: NormedConv::new(params, rng, &format!("{name}.down2"), 2 * b, 4 * b, 3, 2, 1, init),
            res: (0..2)
                .map(|i| ResBlock::new(params, rng, &format!("{name}.res{i}"), 4 * b))
                .collect(),
            up1: NormedConv::new(params, rng, &format!("{name}.up1"), 4 * b, 2 * b, 3, 1, 1, init),
            up2: NormedConv::new(params, rng, &format!("{name}.up2"), 2 * b, b, 3, 1, 1, init),
            out: Conv2d::new(params, rng, &format!("{name}.out"), b, 3, 7, 1, 3, true, init),
        }
    }

    /// Translates a [0,1] image, preserving its shape.
    pub fn translate<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array3<F>,
    ) -> Result<(Array3<F>, TranslatorCache<F>)> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Data(format!("translator expects RGB input, got {c} channels")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Data(format!(
                "translator input dimensions must be positive multiples of 4, got {h}x{w}"
            )));
        }
        let (y, c_stem) = self.stem.forward(params, x);
        let (y, c_d1) = self.down1.forward(params, &y);
        let (y, c_d2) = self.down2.forward(params, &y);
        let mut y = y;
        let mut c_res = Vec::new();
        for r in &self.res {
            let (ry, rc) = r.forward(params, &y);
            y = ry;
            c_res.push(rc);
        }
        let (y, c_u1) = self.up1.forward(params, &upsample_nearest2(&y));
        let (y, c_u2) = self.up2.forward(params, &upsample_nearest2(&y));
        let (logits, c_out) = self.out.forward(params, &y);
        let th = tanh(&logits);
        let half = F::from_f64(0.5);
        let img = th.mapv(|t| half * (t + F::one()));
        Ok((
            img,
            TranslatorCache {
                stem: c_stem,
                down1: c_d1,
                down2: c_d2,
                res: c_res,
                up1: c_u1,
                up2: c_u2,
                out: c_out,
                th,
            },
        ))
    }

    /// Backpropagates an output-image gradient, returning the input one.
    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &TranslatorCache<F>,
        g_img: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let half = F::from_f64(0.5);
        let g_th = g_img.mapv(|g| g * half);
        let g = tanh_backward(&cache.th, &g_th);
        let g = self.out.backward(params, &cache.out, &g, grads);
        let g = self.up2.backward(params, &cache.up2, &g, grads);
        let g = upsample_nearest2_backward(&g);
        let g = self.up1.backward(params, &cache.up1, &g, grads);
        let mut g = upsample_nearest2_backward(&g);
        for (r, rc) in self.res.iter().zip(&cache.res).rev() {
            g = r.backward(params, rc, &g, grads);
        }
        let g = self.down2.backward(params, &cache.down2, &g, grads);
        let g = self.down1.backward(params, &cache.down1, &g, grads);
        self.stem.backward(params, &cache.stem, &g, grads)
    }
}
