//! Patch discriminator: strided convolutions down to a real-valued score
//! map with no output activation, as least-squares adversarial training
//! requires.

use ndarray::Array3;
use rand::Rng;

use crate::nn::layers::{
    leaky_relu, leaky_relu_backward, Conv2d, Conv2dCache, Init, InstanceNorm, InstanceNormCache,
};
use crate::nn::{Gradients, Params, Scalar};
use crate::{Error, Result};

const SLOPE: f64 = 0.2;

/// Three stride-2 stages then a stride-1 scoring convolution; each input
/// patch maps to one unbounded score.
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    n2: InstanceNorm,
    c3: Conv2d,
    n3: InstanceNorm,
    out: Conv2d,
}

pub struct DiscriminatorCache<F> {
    c1: Conv2dCache<F>,
    a1: Array3<F>,
    c2: Conv2dCache<F>,
    n2: InstanceNormCache<F>,
    a2: Array3<F>,
    c3: Conv2dCache<F>,
    n3: InstanceNormCache<F>,
    a3: Array3<F>,
    out: Conv2dCache<F>,
}

impl Discriminator {
    pub fn new<F: Scalar>(params: &mut Params<F>, rng: &mut impl Rng, name: &str, base: usize) -> Self {
        let b = base;
        let init = Init::Normal(0.02);
        Discriminator {
            c1: Conv2d::new(params, rng, &format!("{name}.c1"), 3, b, 4, 2, 1, true, init),
            c2: Conv2d::new(params, rng, &format!("{name}.c2"), b, 2 * b, 4, 2, 1, false, init),
            n2: InstanceNorm::new(params, &format!("{name}.c2.norm"), 2 * b),
            c3: Conv2d::new(params, rng, &format!("{name}.c3"), 2 * b, 4 * b, 4, 2, 1, false, init),
            n3: InstanceNorm::new(params, &format!("{name}.c3.norm"), 4 * b),
            out: Conv2d::new(params, rng, &format!("{name}.out"), 4 * b, 1, 4, 1, 1, true, init),
        }
    }

    /// Real-valued patch scores for a [0,1] RGB image.
    pub fn discriminate<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array3<F>,
    ) -> Result<(Array3<F>, DiscriminatorCache<F>)> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Data(format!(
                "discriminator expects RGB input, got {c} channels"
            )));
        }
        if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
            return Err(Error::Data(format!(
                "discriminator input dimensions must be multiples of 8 and at least 16, got {h}x{w}"
            )));
        }
        let (y, cc1) = self.c1.forward(params, x);
        let a1 = leaky_relu(&y, SLOPE);
        let (y, cc2) = self.c2.forward(params, &a1);
        let (y, cn2) = self.n2.forward(params, &y);
        let a2 = leaky_relu(&y, SLOPE);
        let (y, cc3) = self.c3.forward(params, &a2);
        let (y, cn3) = self.n3.forward(params, &y);
        let a3 = leaky_relu(&y, SLOPE);
        let (score, cout) = self.out.forward(params, &a3);
        Ok((
            score,
            DiscriminatorCache {
                c1: cc1,
                a1,
                c2: cc2,
                n2: cn2,
                a2,
                c3: cc3,
                n3: cn3,
                a3,
                out: cout,
            },
        ))
    }

    /// Backpropagates a score-map gradient, returning the image gradient
    /// (needed when the generator trains through the discriminator).
    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &DiscriminatorCache<F>,
        g_score: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let g = self.out.backward(params, &cache.out, g_score, grads);
        let g = leaky_relu_backward(&cache.a3, &g, SLOPE);
        let g = self.n3.backward(params, &cache.n3, &g, grads);
        let g = self.c3.backward(params, &cache.c3, &g, grads);
        let g = leaky_relu_backward(&cache.a2, &g, SLOPE);
        let g = self.n2.backward(params, &cache.n2, &g, grads);
        let g = self.c2.backward(params, &cache.c2, &g, grads);
        let g = leaky_relu_backward(&cache.a1, &g, SLOPE);
        self.c1.backward(params, &cache.c1, &g, grads)
    }
}
