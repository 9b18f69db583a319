//! Network assemblies: depth U-Nets, the residual image translator, and
//! the patch discriminator.
//!
//! All networks are built from the primitives in [`crate::nn`] and expose
//! explicit forward/backward pairs. Widths are configurable so the same
//! code runs both the default profile and fast desk-scale experiments.

use serde::{Deserialize, Serialize};

use crate::nn::layers::{Conv2d, Conv2dCache, Init, InstanceNorm, InstanceNormCache};
use crate::nn::{Gradients, Params, Scalar};
use crate::{Error, Result};
use ndarray::Array3;
use rand::Rng;

mod discriminator;
mod translator;
mod unet;

pub mod checkpoint;

pub use discriminator::{Discriminator, DiscriminatorCache};
pub use translator::{Translator, TranslatorCache};
pub use unet::{DepthUNet, DepthUNetCache, DEPTH_SCALES};

/// Channel widths for every network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Base channel count of the U-Nets; deeper stages scale it up to 8x.
    pub base_width: usize,
    /// Base channel count of the translator (stages: 1x, 2x, 4x).
    pub translator_base: usize,
    /// Base channel count of the discriminator (stages: 1x, 2x, 4x).
    pub disc_base: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_width: 32,
            translator_base: 8,
            disc_base: 8,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_width", self.base_width),
            ("translator_base", self.translator_base),
            ("disc_base", self.disc_base),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("network width {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Convolution + instance norm + ReLU, the workhorse block.
///
/// The convolution carries no bias: instance normalization would cancel it.
pub(crate) struct NormedConv {
    conv: Conv2d,
    norm: InstanceNorm,
}

pub(crate) struct NormedConvCache<F> {
    conv: Conv2dCache<F>,
    norm: InstanceNormCache<F>,
    /// Post-ReLU output, which identifies the active units.
    out: Array3<F>,
}

impl NormedConv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        NormedConv {
            conv: Conv2d::new(params, rng, name, in_c, out_c, k, stride, pad, false, init),
            norm: InstanceNorm::new(params, &format!("{name}.norm"), out_c),
        }
    }

    pub(crate) fn forward<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, NormedConvCache<F>) {
        let (y, conv) = self.conv.forward(params, x);
        let (y, norm) = self.norm.forward(params, &y);
        let out = crate::nn::layers::relu(&y);
        (
            out.clone(),
            NormedConvCache { conv, norm, out },
        )
    }

    pub(crate) fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &NormedConvCache<F>,
        gy: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let g = crate::nn::layers::relu_backward(&cache.out, gy);
        let g = self.norm.backward(params, &cache.norm, &g, grads);
        self.conv.backward(params, &cache.conv, &g, grads)
    }
}
