//! U-shaped encoder-decoder with skip connections.
//!
//! Four resolution levels: three 2x poolings down, channel width doubling
//! per level, nearest-neighbor upsampling with skip concatenation on the way
//! back up, and a 1x1 head producing the output logits.

use super::conv::Conv2d;
use super::ops::*;
use super::tensor::{GradSet, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

pub const UNET_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    c1: Conv2d,
    c2: Conv2d,
}

struct BlockCache {
    x: Tensor,
    y1: Tensor,
    y2: Tensor,
}

impl ConvBlock {
    fn new(params: &mut ParamSet, name: &str, in_c: usize, out_c: usize) -> Self {
        ConvBlock {
            c1: Conv2d::new(params, &format!("{name}.c1"), in_c, out_c, 3),
            c2: Conv2d::new(params, &format!("{name}.c2"), out_c, out_c, 3),
        }
    }

    fn forward(&self, params: &ParamSet, x: Tensor) -> (Tensor, BlockCache) {
        let y1 = relu(&self.c1.forward(params, &x));
        let y2 = relu(&self.c2.forward(params, &y1));
        let out = y2.clone();
        (out, BlockCache { x, y1, y2 })
    }

    fn backward(&self, params: &ParamSet, cache: &BlockCache, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let dy2 = relu_backward(dy, &cache.y2);
        let dy1_pre = self.c2.backward(params, &cache.y1, &dy2, grads);
        let dy1 = relu_backward(&dy1_pre, &cache.y1);
        self.c1.backward(params, &cache.x, &dy1, grads)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
}

pub struct UNetCache {
    enc: Vec<BlockCache>,
    pools: Vec<(Vec<u32>, usize, usize, usize)>,
    dec: Vec<BlockCache>,
    head_in: Tensor,
}

impl UNet {
    pub fn new(params: &mut ParamSet, name: &str, cfg: UNetConfig) -> Self {
        let w = cfg.base_width;
        let mut enc = Vec::new();
        for i in 0..UNET_LEVELS {
            let in_c = if i == 0 { cfg.in_channels } else { w << (i - 1) };
            enc.push(ConvBlock::new(params, &format!("{name}.enc{i}"), in_c, w << i));
        }
        let mut dec = Vec::new();
        for i in 0..UNET_LEVELS - 1 {
            // Input: skip (w<<i) + upsampled deeper feature (w<<(i+1)).
            let in_c = (w << i) + (w << (i + 1));
            dec.push(ConvBlock::new(params, &format!("{name}.dec{i}"), in_c, w << i));
        }
        let head = Conv2d::new(params, &format!("{name}.head"), w, cfg.out_channels, 1);
        UNet { cfg, enc, dec, head }
    }

    /// Spatial dims must be divisible by 8 (three poolings).
    pub fn forward(&self, params: &ParamSet, x: Tensor) -> (Tensor, UNetCache) {
        assert!(
            x.h.is_multiple_of(8) && x.w.is_multiple_of(8),
            "unet input dims must be divisible by 8, got {}x{}",
            x.h,
            x.w
        );
        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        let mut cur = x;
        let mut skips: Vec<Tensor> = Vec::new();
        for i in 0..UNET_LEVELS - 1 {
            let (out, cache) = self.enc[i].forward(params, cur);
            skips.push(out.clone());
            enc_caches.push(cache);
            let (pooled, idx) = maxpool2(&out);
            pools.push((idx, out.c, out.h, out.w));
            cur = pooled;
        }
        let (mut cur, bott_cache) = self.enc[UNET_LEVELS - 1].forward(params, cur);
        enc_caches.push(bott_cache);

        let mut dec_caches: Vec<Option<BlockCache>> = (0..UNET_LEVELS - 1).map(|_| None).collect();
        for i in (0..UNET_LEVELS - 1).rev() {
            let up = upsample2(&cur);
            let cat = concat(&skips[i], &up);
            let (out, cache) = self.dec[i].forward(params, cat);
            dec_caches[i] = Some(cache);
            cur = out;
        }
        let head_in = cur;
        let logits = self.head.forward(params, &head_in);
        (
            logits,
            UNetCache {
                enc: enc_caches,
                pools,
                dec: dec_caches.into_iter().map(|c| c.unwrap()).collect(),
                head_in,
            },
        )
    }

    /// Backward from dL/dlogits; accumulates into `grads`, returns dL/dinput.
    pub fn backward(&self, params: &ParamSet, cache: &UNetCache, dlogits: &Tensor, grads: &mut GradSet) -> Tensor {
        let mut cur = self.head.backward(params, &cache.head_in, dlogits, grads);
        let mut skip_grads: Vec<Option<Tensor>> = (0..UNET_LEVELS - 1).map(|_| None).collect();
        for i in 0..UNET_LEVELS - 1 {
            let dcat = self.dec[i].backward(params, &cache.dec[i], &cur, grads);
            let skip_c = self.cfg.base_width << i;
            let (dskip, dup) = concat_backward(&dcat, skip_c);
            skip_grads[i] = Some(dskip);
            cur = upsample2_backward(&dup);
        }
        // cur is now the gradient at the bottleneck output.
        let mut dcur = self.enc[UNET_LEVELS - 1].backward(params, &cache.enc[UNET_LEVELS - 1], &cur, grads);
        for i in (0..UNET_LEVELS - 1).rev() {
            let (idx, c, h, w) = &cache.pools[i];
            let mut denc_out = maxpool2_backward(&dcur, idx, *c, *h, *w);
            // Skip connection adds its gradient at the encoder output.
            let dskip = skip_grads[i].take().unwrap();
            for (a, b) in denc_out.data.iter_mut().zip(&dskip.data) {
                *a += b;
            }
            dcur = self.enc[i].backward(params, &cache.enc[i], &denc_out, grads);
        }
        dcur
    }

    /// Inference without caching.
    pub fn infer(&self, params: &ParamSet, x: Tensor) -> Tensor {
        let (logits, _) = self.forward(params, x);
        logits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::nn::optim::Adam;

    // Overfit two fixed samples: loss must fall by 10x. Exercises the full
    // forward/backward path including skips, pools and upsampling.
    #[test]
    fn unet_overfits_tiny_task() {
        let cfg = UNetConfig {
            in_channels: 2,
            out_channels: 3,
            base_width: 4,
        };
        let mut params = ParamSet::with_seed(21);
        let net = UNet::new(&mut params, "t", cfg);

        // Targets: class = quadrant pattern.
        let mut target = vec![0u16; 16 * 16];
        for y in 0..16 {
            for x in 0..16 {
                target[y * 16 + x] = ((y / 8) * 2 + x / 8).min(2) as u16;
            }
        }
        let mut input = Tensor::zeros(2, 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                input.data[y * 16 + x] = x as f32 / 16.0;
                input.data[256 + y * 16 + x] = y as f32 / 16.0;
            }
        }

        let mut opt = Adam::new(&params, 1e-2, 0.9, 0.999, 1e-8, 0.0);
        let mut first = 0.0;
        let mut last = 0.0;
        for it in 0..400 {
            let (logits, cache) = net.forward(&params, input.clone());
            let (loss, dlogits) = losses::cross_entropy_with_grad(&logits, &target);
            if it == 0 {
                first = loss;
            }
            last = loss;
            let mut grads = GradSet::zeros_like(&params);
            net.backward(&params, &cache, &dlogits, &mut grads);
            opt.step(&mut params, &grads, 1.0);
        }
        assert!(last < first * 0.1, "loss {first} -> {last} did not drop 10x");
        assert!(last.is_finite());
    }
}
