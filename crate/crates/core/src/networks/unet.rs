//! Encoder-decoder depth network with skip connections and four heads.
//!
//! The encoder halves resolution four times (so inputs must be divisible
//! by 16); the decoder mirrors it with nearest-neighbor upsampling and
//! skip concatenation, emitting a sigmoid depth head at full, half,
//! quarter and eighth resolution. Sigmoid outputs map affinely onto the
//! working depth range, which bounds every prediction structurally.

use ndarray::Array3;
use rand::Rng;

use super::{NormedConv, NormedConvCache};
use crate::nn::layers::{sigmoid, sigmoid_backward, Conv2d, Conv2dCache, Init};
use crate::nn::resize::{
    concat_channels, split_channels, upsample_nearest2, upsample_nearest2_backward,
};
use crate::nn::{Gradients, Params, Scalar};
use crate::{Error, Result, DEPTH_MAX_M, DEPTH_MIN_M};

/// Output scale denominators, full resolution first.
pub const DEPTH_SCALES: [usize; 4] = [1, 2, 4, 8];

/// U-Net depth regressor; `in_channels` is 3 for images, 2 for
/// semantic+edge input.
pub struct DepthUNet {
    stem1: NormedConv,
    stem2: NormedConv,
    downs: Vec<Down>,
    ups: Vec<Up>,
    /// Head convolutions ordered coarsest first (matching decoder order).
    heads: Vec<Conv2d>,
    in_channels: usize,
}

struct Down {
    reduce: NormedConv,
    refine: NormedConv,
}

struct Up {
    fuse: NormedConv,
    skip_channels: usize,
    up_channels: usize,
}

pub struct DepthUNetCache<F> {
    stem1: NormedConvCache<F>,
    stem2: NormedConvCache<F>,
    downs: Vec<(NormedConvCache<F>, NormedConvCache<F>)>,
    ups: Vec<NormedConvCache<F>>,
    /// Head conv caches plus sigmoid outputs, coarsest first.
    heads: Vec<(Conv2dCache<F>, Array3<F>)>,
}

impl DepthUNet {
    pub fn new<F: Scalar>(
        params: &mut Params<F>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        base: usize,
    ) -> Self {
        let b = base;
        let stem1 = NormedConv::new(params, rng, &format!("{name}.stem1"), in_channels, b, 3, 1, 1, Init::He);
        let stem2 = NormedConv::new(params, rng, &format!("{name}.stem2"), b, b, 3, 1, 1, Init::He);
        // Encoder channel ladder: b -> 2b -> 4b -> 8b -> 8b.
        let enc_ch = [b, 2 * b, 4 * b, 8 * b, 8 * b];
        let mut downs = Vec::new();
        for i in 0..4 {
            let (ci, co) = (enc_ch[i], enc_ch[i + 1]);
            downs.push(Down {
                reduce: NormedConv::new(params, rng, &format!("{name}.down{i}.reduce"), ci, co, 4, 2, 1, Init::He),
                refine: NormedConv::new(params, rng, &format!("{name}.down{i}.refine"), co, co, 3, 1, 1, Init::He),
            });
        }
        // Decoder from the bottleneck back up; skip sources are the
        // encoder stages at matching resolution.
        let dec_out = [4 * b, 2 * b, b, b];
        let mut ups = Vec::new();
        let mut heads = Vec::new();
        let mut cur = enc_ch[4];
        for i in 0..4 {
            let skip = enc_ch[3 - i];
            ups.push(Up {
                fuse: NormedConv::new(
                    params,
                    rng,
                    &format!("{name}.up{i}.fuse"),
                    skip + cur,
                    dec_out[i],
                    3,
                    1,
                    1,
                    Init::He,
                ),
                skip_channels: skip,
                up_channels: cur,
            });
            heads.push(Conv2d::new(
                params,
                rng,
                &format!("{name}.head{i}"),
                dec_out[i],
                1,
                3,
                1,
                1,
                true,
                Init::He,
            ));
            cur = dec_out[i];
        }
        DepthUNet {
            stem1,
            stem2,
            downs,
            ups,
            heads,
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Multiscale depth prediction in meters, full resolution first.
    pub fn forward_depth<F: Scalar>(
        &self,
        params: &Params<F>,
        x: &Array3<F>,
    ) -> Result<(Vec<Array3<F>>, DepthUNetCache<F>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Data(format!(
                "depth network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Data(format!(
                "depth network input dimensions must be positive multiples of 16, got {h}x{w}"
            )));
        }
        let span = F::from_f64(DEPTH_MAX_M - DEPTH_MIN_M);
        let dmin = F::from_f64(DEPTH_MIN_M);

        let (s0, c_stem1) = self.stem1.forward(params, x);
        let (s0, c_stem2) = self.stem2.forward(params, &s0);
        let mut skips = vec![s0];
        let mut down_caches = Vec::new();
        for d in &self.downs {
            let (y, c1) = d.reduce.forward(params, skips.last().unwrap());
            let (y, c2) = d.refine.forward(params, &y);
            down_caches.push((c1, c2));
            skips.push(y);
        }

        let mut cur = skips.pop().unwrap();
        let mut up_caches = Vec::new();
        let mut head_caches = Vec::new();
        let mut depths_coarse_first = Vec::new();
        for (u, head) in self.ups.iter().zip(&self.heads) {
            let upsampled = upsample_nearest2(&cur);
            let skip = skips.pop().unwrap();
            let fused = concat_channels(&[skip.view(), upsampled.view()]);
            let (y, cu) = u.fuse.forward(params, &fused);
            let (logits, ch) = head.forward(params, &y);
            let sig = sigmoid(&logits);
            depths_coarse_first.push(sig.mapv(|s| dmin + s * span));
            head_caches.push((ch, sig));
            up_caches.push(cu);
            cur = y;
        }
        depths_coarse_first.reverse();
        Ok((
            depths_coarse_first,
            DepthUNetCache {
                stem1: c_stem1,
                stem2: c_stem2,
                downs: down_caches,
                ups: up_caches,
                heads: head_caches,
            },
        ))
    }

    /// Backpropagates per-scale depth gradients (full resolution first)
    /// into the parameters, returning the input-image gradient.
    pub fn backward<F: Scalar>(
        &self,
        params: &Params<F>,
        cache: &DepthUNetCache<F>,
        d_depths: &[Array3<F>],
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        assert_eq!(d_depths.len(), 4, "one gradient per output scale");
        let span = F::from_f64(DEPTH_MAX_M - DEPTH_MIN_M);

        // Walk the decoder in reverse (finest first), accumulating the
        // gradient flowing into each stage's feature map.
        let mut g_cur: Option<Array3<F>> = None;
        let mut g_skips: Vec<Array3<F>> = Vec::new();
        for i in (0..4).rev() {
            let u = &self.ups[i];
            let (head_cache, sig) = &cache.heads[i];
            // d_depths is full-res first; decoder index i emits scale 3-i.
            let d_sigma = d_depths[3 - i].mapv(|g| g * span);
            let g_logits = sigmoid_backward(sig, &d_sigma);
            let mut g_y = self.heads[i].backward(params, head_cache, &g_logits, grads);
            if let Some(g) = g_cur.take() {
                g_y += &g;
            }
            let g_fused = u.fuse.backward(params, &cache.ups[i], &g_y, grads);
            let parts = split_channels(&g_fused, &[u.skip_channels, u.up_channels]);
            g_skips.push(parts[0].clone());
            g_cur = Some(upsample_nearest2_backward(&parts[1]));
        }

        // Encoder backward: bottleneck gradient is g_cur; each encoder
        // output s_i additionally receives its skip gradient. The reverse
        // decoder walk above pushed those as g_skips[i] = grad of s_i.
        let mut g = g_cur.unwrap();
        for i in (0..4).rev() {
            let (c_reduce, c_refine) = &cache.downs[i];
            let g_refined = self.downs[i].refine.backward(params, c_refine, &g, grads);
            let mut g_in = self.downs[i].reduce.backward(params, c_reduce, &g_refined, grads);
            g_in += &g_skips[i];
            g = g_in;
        }
        let g = self.stem2.backward(params, &cache.stem2, &g, grads);
        self.stem1.backward(params, &cache.stem1, &g, grads)
    }
}
