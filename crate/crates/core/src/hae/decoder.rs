//! Decoders: the upsampling path fuses decoded features with encoder
//! pyramid levels via SCA, then either synthesizes the frame from predicted
//! deformable interpolation kernels (VFI) or adds a learned residual to the
//! blurry input (deblurring).

use crate::error::{Error, Result};
use crate::nn::blocks::{ResBlock, SelfAttention2d};
use crate::nn::layers::{join, Params};
use crate::nn::ops::{kernel_sample, upsample_nearest2d};
use crate::nn::{Conv2d, GroupNorm, Scalar, Tensor};
use crate::stca::Sca;
use crate::TrainRng;

use super::encoder::PyramidLevel;
use super::{HAEConfig, EMBED_CHANNELS};

fn fusion_kv_channels(cfg: &HAEConfig, level: usize, n_pairs: usize) -> usize {
    let mut c = cfg.img_channels(level) * n_pairs;
    if cfg.fuse_event_pyramid && cfg.fusion.uses_event_branch() {
        c += cfg.bins * cfg.evt_channels(level) * n_pairs;
    }
    c
}

fn gather_kv<S: Scalar>(
    cfg: &HAEConfig,
    levels: &[&PyramidLevel<S>],
) -> Result<Tensor<S>> {
    let mut parts: Vec<Tensor<S>> = Vec::new();
    for lvl in levels {
        parts.push(lvl.img.clone());
    }
    if cfg.fuse_event_pyramid && cfg.fusion.uses_event_branch() {
        for lvl in levels {
            let ev = lvl.evt.as_ref().ok_or_else(|| {
                Error::domain("decoder configured to fuse event features but pyramid has none".to_string())
            })?;
            let s = ev.shape();
            parts.push(ev.reshape(&[s[0], s[1] * s[2], s[3], s[4]]));
        }
    }
    Ok(if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        Tensor::concat(1, &parts)
    })
}

struct UpLevel<S: Scalar> {
    fuse: Sca<S>,
    res: ResBlock<S>,
    up_conv: Conv2d<S>,
}

struct UpPath<S: Scalar> {
    conv_in: Conv2d<S>,
    mid_res1: ResBlock<S>,
    mid_attn: SelfAttention2d<S>,
    mid_res2: ResBlock<S>,
    levels: Vec<UpLevel<S>>, // deepest first
    cfg: HAEConfig,
    n_pairs: usize,
}

impl<S: Scalar> UpPath<S> {
    fn new(cfg: &HAEConfig, n_pairs: usize, rng: &mut TrainRng) -> Self {
        let deep = cfg.img_channels(cfg.n_down - 1);
        let mut levels = Vec::new();
        for s in (0..cfg.n_down).rev() {
            let ch = cfg.img_channels(s);
            let ch_next = cfg.img_channels(s.saturating_sub(1));
            levels.push(UpLevel {
                fuse: Sca::new(rng, fusion_kv_channels(cfg, s, n_pairs), ch, cfg.attention),
                res: ResBlock::new(rng, ch, ch, None),
                up_conv: Conv2d::new(rng, ch, ch_next, 3, 1, 1),
            });
        }
        UpPath {
            conv_in: Conv2d::new(rng, EMBED_CHANNELS, deep, 3, 1, 1),
            mid_res1: ResBlock::new(rng, deep, deep, None),
            mid_attn: SelfAttention2d::new(rng, deep),
            mid_res2: ResBlock::new(rng, deep, deep, None),
            levels,
            cfg: cfg.clone(),
            n_pairs,
        }
    }

    /// `pyramids[k][s]` is pyramid `k`'s level `s+1`; returns the full-res
    /// feature map at `img_channels(0)`.
    fn forward(&self, z_q: &Tensor<S>, pyramids: &[&[PyramidLevel<S>]]) -> Result<Tensor<S>> {
        if pyramids.len() != self.n_pairs {
            return Err(Error::domain(format!(
                "decoder expects {} pyramids, got {}",
                self.n_pairs,
                pyramids.len()
            )));
        }
        for p in pyramids {
            if p.len() != self.cfg.n_down {
                return Err(Error::domain(format!(
                    "pyramid has {} levels, config says {}",
                    p.len(),
                    self.cfg.n_down
                )));
            }
        }
        let zs = z_q.shape();
        if zs.len() != 4 || zs[1] != EMBED_CHANNELS {
            return Err(Error::domain(format!(
                "decode expects a (N, {EMBED_CHANNELS}, h, w) latent, got {zs:?}"
            )));
        }
        let mut x = self.conv_in.forward(z_q);
        x = self.mid_res1.forward(&x, None);
        x = self.mid_attn.forward(&x);
        x = self.mid_res2.forward(&x, None);
        for (i, s) in (0..self.cfg.n_down).rev().enumerate() {
            let lvl = &self.levels[i];
            let level_views: Vec<&PyramidLevel<S>> =
                pyramids.iter().map(|p| &p[s]).collect();
            let kv = gather_kv(&self.cfg, &level_views)?;
            x = lvl.fuse.forward_kv(&kv, &x)?;
            x = lvl.res.forward(&x, None);
            x = lvl.up_conv.forward(&upsample_nearest2d(&x, 2));
        }
        Ok(x)
    }
}

impl<S: Scalar> Params<S> for UpPath<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.conv_in.collect(&join(prefix, "conv_in"), out);
        self.mid_res1.collect(&join(prefix, "mid_res1"), out);
        self.mid_attn.collect(&join(prefix, "mid_attn"), out);
        self.mid_res2.collect(&join(prefix, "mid_res2"), out);
        for (i, l) in self.levels.iter().enumerate() {
            l.fuse.collect(&join(prefix, &format!("up{i}.fuse")), out);
            l.res.collect(&join(prefix, &format!("up{i}.res")), out);
            l.up_conv.collect(&join(prefix, &format!("up{i}.up_conv")), out);
        }
    }
}

/// Blend two deformably sampled boundary frames with per-pixel convex masks.
/// `weights*` must already be normalized over the kernel axis and `masks`
/// `(N, 2, H, W)` convex per pixel; exposed separately so the identity-head
/// contract is testable without a trained network.
#[allow(clippy::too_many_arguments)]
pub fn blend_kernels<S: Scalar>(
    i0: &Tensor<S>,
    i1: &Tensor<S>,
    w0: &Tensor<S>,
    off0: &Tensor<S>,
    w1: &Tensor<S>,
    off1: &Tensor<S>,
    masks: &Tensor<S>,
    k: usize,
) -> Tensor<S> {
    let s0 = kernel_sample(i0, w0, off0, k);
    let s1 = kernel_sample(i1, w1, off1, k);
    let m0 = masks.slice_axis_op(1, 0, 1);
    let m1 = masks.slice_axis_op(1, 1, 2);
    m0.mul(&s0).add(&m1.mul(&s1)).clamp(S::ZERO, S::ONE)
}

/// Kernel-synthesis decoder: predicts per pixel, for each boundary frame, a
/// `K*K` kernel weight map (softmax-normalized), 2-D offsets (tanh-bounded
/// to `H/4`), and a blend mask (softmax over the two frames).
pub struct Decoder<S: Scalar> {
    path: UpPath<S>,
    head_norm: GroupNorm<S>,
    head_conv: Conv2d<S>,
    k: usize,
}

impl<S: Scalar> Decoder<S> {
    pub fn new(cfg: &HAEConfig, rng: &mut TrainRng) -> Self {
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let head_ch = 2 * (3 * k2 + 1);
        let c0 = cfg.img_channels(0);
        Decoder {
            path: UpPath::new(cfg, 2, rng),
            head_norm: GroupNorm::new(c0),
            head_conv: Conv2d::new(rng, c0, head_ch, 3, 1, 1),
            k: cfg.kernel_size,
        }
    }

    pub fn forward(
        &self,
        z_q: &Tensor<S>,
        pyr0: &[PyramidLevel<S>],
        pyr1: &[PyramidLevel<S>],
        i0: &Tensor<S>,
        i1: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if i0.shape() != i1.shape() {
            return Err(Error::domain(format!(
                "boundary frames disagree: {:?} vs {:?}",
                i0.shape(),
                i1.shape()
            )));
        }
        let feat = self.path.forward(z_q, &[pyr0, pyr1])?;
        let fs = feat.shape();
        let (n, h, w) = (fs[0], fs[2], fs[3]);
        let is = i0.shape();
        if is[2] != h || is[3] != w {
            return Err(Error::domain(format!(
                "decoded feature {h}x{w} does not match boundary frames {}x{}",
                is[2], is[3]
            )));
        }
        let head = self
            .head_conv
            .forward(&self.head_norm.forward(&feat).silu());
        let k2 = self.k * self.k;
        let per = 3 * k2 + 1;
        let bound = S::from_f64(h as f64 / 4.0);

        let slice = |b: usize, from: usize, to: usize| {
            head.slice_axis_op(1, b * per + from, b * per + to)
        };
        let w0 = slice(0, 0, k2).softmax(1);
        let off0 = slice(0, k2, 3 * k2).tanh().scale(bound);
        let w1 = slice(1, 0, k2).softmax(1);
        let off1 = slice(1, k2, 3 * k2).tanh().scale(bound);
        let m_logits = Tensor::concat(
            1,
            &[slice(0, 3 * k2, per), slice(1, 3 * k2, per)],
        );
        let masks = m_logits.softmax(1);
        let _ = n;
        Ok(blend_kernels(i0, i1, &w0, &off0, &w1, &off1, &masks, self.k))
    }
}

impl<S: Scalar> Params<S> for Decoder<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.path.collect(prefix, out);
        self.head_norm.collect(&join(prefix, "head_norm"), out);
        self.head_conv.collect(&join(prefix, "head_conv"), out);
    }
}

/// Simplified U-Net-style head for deblurring: the decoded feature predicts
/// a residual added to the blurry input. The final conv is zero-initialized
/// so the decoder is the identity on the blurry frame at init.
pub struct DeblurDecoder<S: Scalar> {
    path: UpPath<S>,
    head_norm: GroupNorm<S>,
    head_conv: Conv2d<S>,
}

impl<S: Scalar> DeblurDecoder<S> {
    pub fn new(cfg: &HAEConfig, rng: &mut TrainRng) -> Self {
        let c0 = cfg.img_channels(0);
        DeblurDecoder {
            path: UpPath::new(cfg, 1, rng),
            head_norm: GroupNorm::new(c0),
            head_conv: Conv2d::zeros(c0, cfg.in_channels, 3, 1, 1),
        }
    }

    pub fn forward(
        &self,
        z_q: &Tensor<S>,
        pyr: &[PyramidLevel<S>],
        blur: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let feat = self.path.forward(z_q, &[pyr])?;
        let residual = self
            .head_conv
            .forward(&self.head_norm.forward(&feat).silu());
        if residual.shape() != blur.shape() {
            return Err(Error::domain(format!(
                "deblur residual {:?} does not match input {:?}",
                residual.shape(),
                blur.shape()
            )));
        }
        Ok(blur.add(&residual).clamp(S::ZERO, S::ONE))
    }
}

impl<S: Scalar> Params<S> for DeblurDecoder<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.path.collect(prefix, out);
        self.head_norm.collect(&join(prefix, "head_norm"), out);
        self.head_conv.collect(&join(prefix, "head_conv"), out);
    }
}
