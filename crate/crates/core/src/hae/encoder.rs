//! Dual-branch encoder: per-level residual blocks on both modalities,
//! bidirectional STCA fusion, strided downsampling; the deepest image
//! feature passes through residual blocks and a spatial self-attention
//! before projection to the 3-channel latent.

use crate::error::{Error, Result};
use crate::nn::blocks::{ResBlock, SelfAttention2d};
use crate::nn::layers::{join, Params};
use crate::nn::{Conv2d, GroupNorm, Scalar, Tensor};
use crate::stca::{Sca, Tca};
use crate::TrainRng;

use super::{FusionMode, HAEConfig, EMBED_CHANNELS};

/// One pyramid level: the image feature and, when the event branch exists,
/// the `(N, T, Ce, h, w)` event feature at the same resolution.
pub struct PyramidLevel<S: Scalar> {
    pub img: Tensor<S>,
    pub evt: Option<Tensor<S>>,
}

pub struct EncodeOutput<S: Scalar> {
    /// Levels s = 1..n_down, level s at `(H/2^s, W/2^s)`.
    pub pyramid: Vec<PyramidLevel<S>>,
    /// `(N, 3, H/2^n, W/2^n)` latent embedding.
    pub embedding: Tensor<S>,
}

enum Fusion<S: Scalar> {
    Stca { sca: Sca<S>, tca: Tca<S> },
    ScaOnly(Sca<S>),
    TcaOnly(Tca<S>),
    None,
}

struct DownBlock<S: Scalar> {
    img_res: Vec<ResBlock<S>>,
    evt_res: Vec<ResBlock<S>>,
    fusion: Fusion<S>,
    img_down: Conv2d<S>,
    evt_down: Option<Conv2d<S>>,
}

impl<S: Scalar> DownBlock<S> {
    fn new(cfg: &HAEConfig, level: usize, rng: &mut TrainRng) -> Self {
        let ci = cfg.img_channels(level);
        let ci_prev = if level == 0 {
            ci
        } else {
            cfg.img_channels(level - 1)
        };
        let ce = cfg.evt_channels(level);
        let ce_prev = if level == 0 {
            ce
        } else {
            cfg.evt_channels(level - 1)
        };
        let has_evt = cfg.fusion.uses_event_branch();

        let mut img_res = Vec::new();
        let mut evt_res = Vec::new();
        for r in 0..cfg.res_blocks.max(1) {
            let (i_in, e_in) = if r == 0 { (ci_prev, ce_prev) } else { (ci, ce) };
            img_res.push(ResBlock::new(rng, i_in, ci, None));
            if has_evt {
                evt_res.push(ResBlock::new(rng, e_in, ce, None));
            }
        }
        let fusion = match cfg.fusion {
            FusionMode::Stca => Fusion::Stca {
                sca: Sca::new(rng, cfg.bins * ce, ci, cfg.attention),
                tca: Tca::new(rng, ce, ci, cfg.attention),
            },
            FusionMode::Sca => Fusion::ScaOnly(Sca::new(rng, cfg.bins * ce, ci, cfg.attention)),
            FusionMode::Tca => Fusion::TcaOnly(Tca::new(rng, ce, ci, cfg.attention)),
            FusionMode::Concat | FusionMode::ConcatL => Fusion::None,
        };
        DownBlock {
            img_res,
            evt_res,
            fusion,
            img_down: Conv2d::new(rng, ci, ci, 3, 2, 1),
            evt_down: if has_evt {
                Some(Conv2d::new(rng, ce, ce, 3, 2, 1))
            } else {
                None
            },
        }
    }

    /// Residual blocks per branch, SCA into the image branch and TCA into
    /// the event branch, then strided downsampling of both.
    fn forward(
        &self,
        img: &Tensor<S>,
        evt: Option<&Tensor<S>>,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let mut i = img.clone();
        for rb in &self.img_res {
            i = rb.forward(&i, None);
        }
        let mut e = evt.cloned();
        if let Some(ev) = e.as_mut() {
            let s = ev.shape();
            let (n, t) = (s[0], s[1]);
            let mut folded = ev.reshape(&[n * t, s[2], s[3], s[4]]);
            for rb in &self.evt_res {
                folded = rb.forward(&folded, None);
            }
            let fs = folded.shape();
            *ev = folded.reshape(&[n, t, fs[1], fs[2], fs[3]]);
        }

        let (fused_img, fused_evt) = match (&self.fusion, &e) {
            (Fusion::Stca { sca, tca }, Some(ev)) => {
                (sca.forward(ev, &i)?, Some(tca.forward(ev, &i)?))
            }
            (Fusion::ScaOnly(sca), Some(ev)) => (sca.forward(ev, &i)?, Some(ev.clone())),
            (Fusion::TcaOnly(tca), Some(ev)) => (i.clone(), Some(tca.forward(ev, &i)?)),
            _ => (i.clone(), e.clone()),
        };

        let img_out = self.img_down.forward(&fused_img);
        let evt_out = match (&self.evt_down, fused_evt) {
            (Some(down), Some(ev)) => {
                let s = ev.shape();
                let (n, t) = (s[0], s[1]);
                let folded = ev.reshape(&[n * t, s[2], s[3], s[4]]);
                let d = down.forward(&folded);
                let ds = d.shape();
                Some(d.reshape(&[n, t, ds[1], ds[2], ds[3]]))
            }
            _ => None,
        };
        Ok((img_out, evt_out))
    }
}

impl<S: Scalar> Params<S> for DownBlock<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, rb) in self.img_res.iter().enumerate() {
            rb.collect(&join(prefix, &format!("img_res{i}")), out);
        }
        for (i, rb) in self.evt_res.iter().enumerate() {
            rb.collect(&join(prefix, &format!("evt_res{i}")), out);
        }
        match &self.fusion {
            Fusion::Stca { sca, tca } => {
                sca.collect(&join(prefix, "sca"), out);
                tca.collect(&join(prefix, "tca"), out);
            }
            Fusion::ScaOnly(sca) => sca.collect(&join(prefix, "sca"), out),
            Fusion::TcaOnly(tca) => tca.collect(&join(prefix, "tca"), out),
            Fusion::None => {}
        }
        self.img_down.collect(&join(prefix, "img_down"), out);
        if let Some(d) = &self.evt_down {
            d.collect(&join(prefix, "evt_down"), out);
        }
    }
}

pub struct Encoder<S: Scalar> {
    conv_in_img: Conv2d<S>,
    conv_in_evt: Option<Conv2d<S>>,
    blocks: Vec<DownBlock<S>>,
    mid_res1: ResBlock<S>,
    mid_attn: SelfAttention2d<S>,
    mid_res2: ResBlock<S>,
    norm_out: GroupNorm<S>,
    conv_embed: Conv2d<S>,
    cfg: HAEConfig,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(cfg: &HAEConfig, rng: &mut TrainRng) -> Self {
        let has_evt = cfg.fusion.uses_event_branch();
        let img_in = if has_evt {
            cfg.in_channels
        } else {
            // concat fusion feeds the flattened voxel alongside the image
            cfg.in_channels + cfg.bins * 2
        };
        let deep = cfg.img_channels(cfg.n_down - 1);
        Encoder {
            conv_in_img: Conv2d::new(rng, img_in, cfg.img_channels(0), 3, 1, 1),
            conv_in_evt: if has_evt {
                Some(Conv2d::new(rng, 2, cfg.evt_channels(0), 3, 1, 1))
            } else {
                None
            },
            blocks: (0..cfg.n_down)
                .map(|l| DownBlock::new(cfg, l, rng))
                .collect(),
            mid_res1: ResBlock::new(rng, deep, deep, None),
            mid_attn: SelfAttention2d::new(rng, deep),
            mid_res2: ResBlock::new(rng, deep, deep, None),
            norm_out: GroupNorm::new(deep),
            conv_embed: Conv2d::new(rng, deep, EMBED_CHANNELS, 3, 1, 1),
            cfg: cfg.clone(),
        }
    }

    /// `img`: `(N, C, H, W)`; `voxel`: `(N, bins, 2, H, W)` (an all-zero
    /// voxel is the padded ground-truth pair).
    pub fn forward(&self, img: &Tensor<S>, voxel: &Tensor<S>) -> Result<EncodeOutput<S>> {
        let is = img.shape();
        let vs = voxel.shape();
        if is.len() != 4 || is[1] != self.cfg.in_channels {
            return Err(Error::domain(format!(
                "encode: image must be (N, {}, H, W), got {is:?}",
                self.cfg.in_channels
            )));
        }
        let (n, h, w) = (is[0], is[2], is[3]);
        let f = self.cfg.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::domain(format!(
                "encode: {h}x{w} not divisible by 2^n_down = {f}"
            )));
        }
        if vs != vec![n, self.cfg.bins, 2, h, w] {
            return Err(Error::domain(format!(
                "encode: voxel must be (N, {}, 2, {h}, {w}), got {vs:?}",
                self.cfg.bins
            )));
        }

        let (mut i, mut e) = match &self.conv_in_evt {
            Some(conv_evt) => {
                let folded = voxel.reshape(&[n * self.cfg.bins, 2, h, w]);
                let ev = conv_evt.forward(&folded);
                let es = ev.shape();
                (
                    self.conv_in_img.forward(img),
                    Some(ev.reshape(&[n, self.cfg.bins, es[1], es[2], es[3]])),
                )
            }
            None => {
                let flat = voxel.reshape(&[n, self.cfg.bins * 2, h, w]);
                let stacked = Tensor::concat(1, &[img.clone(), flat]);
                (self.conv_in_img.forward(&stacked), None)
            }
        };

        let mut pyramid = Vec::with_capacity(self.cfg.n_down);
        for block in &self.blocks {
            let (ni, ne) = block.forward(&i, e.as_ref())?;
            pyramid.push(PyramidLevel {
                img: ni.clone(),
                evt: ne.clone(),
            });
            i = ni;
            e = ne;
        }

        let mid = self.mid_res1.forward(&i, None);
        let mid = self.mid_attn.forward(&mid);
        let mid = self.mid_res2.forward(&mid, None);
        let embedding = self
            .conv_embed
            .forward(&self.norm_out.forward(&mid).silu());
        Ok(EncodeOutput { pyramid, embedding })
    }

    pub fn config(&self) -> &HAEConfig {
        &self.cfg
    }
}

impl<S: Scalar> Params<S> for Encoder<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.conv_in_img.collect(&join(prefix, "conv_in_img"), out);
        if let Some(c) = &self.conv_in_evt {
            c.collect(&join(prefix, "conv_in_evt"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("down{i}")), out);
        }
        self.mid_res1.collect(&join(prefix, "mid_res1"), out);
        self.mid_attn.collect(&join(prefix, "mid_attn"), out);
        self.mid_res2.collect(&join(prefix, "mid_res2"), out);
        self.norm_out.collect(&join(prefix, "norm_out"), out);
        self.conv_embed.collect(&join(prefix, "conv_embed"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::randn_array;
    use rand::SeedableRng;

    fn small_cfg() -> HAEConfig {
        HAEConfig {
            n_down: 3,
            base_channels: 8,
            event_base_channels: 4,
            channel_mult: vec![1, 2, 2],
            bins: 2,
            res_blocks: 1,
            ..Default::default()
        }
    }

    #[test]
    fn pyramid_and_embedding_shapes() {
        let mut rng = TrainRng::seed_from_u64(1);
        let cfg = small_cfg();
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let img = Tensor::from_array(randn_array(&mut rng, &[2, 1, 64, 64], 1.0));
        let vox = Tensor::zeros(&[2, 2, 2, 64, 64]);
        let out = enc.forward(&img, &vox).unwrap();
        assert_eq!(out.pyramid.len(), 3);
        assert_eq!(out.pyramid[0].img.shape(), vec![2, 8, 32, 32]);
        assert_eq!(out.pyramid[1].img.shape(), vec![2, 16, 16, 16]);
        assert_eq!(out.pyramid[2].img.shape(), vec![2, 16, 8, 8]);
        assert_eq!(out.pyramid[0].evt.as_ref().unwrap().shape(), vec![2, 2, 4, 32, 32]);
        assert_eq!(out.embedding.shape(), vec![2, 3, 8, 8]);
    }

    #[test]
    fn full_resolution_latent_shape() {
        // 256x256 with three downsampling blocks -> (3, 32, 32) latent
        let mut rng = TrainRng::seed_from_u64(10);
        let cfg = HAEConfig {
            n_down: 3,
            base_channels: 4,
            event_base_channels: 2,
            channel_mult: vec![1, 1, 1],
            bins: 1,
            res_blocks: 1,
            ..Default::default()
        };
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let img = Tensor::zeros(&[1, 1, 256, 256]);
        let vox = Tensor::zeros(&[1, 1, 2, 256, 256]);
        let out = enc.forward(&img, &vox).unwrap();
        assert_eq!(out.embedding.shape(), vec![1, 3, 32, 32]);
        assert_eq!(out.pyramid[0].img.shape()[2..], [128, 128]);
        assert_eq!(out.pyramid[1].img.shape()[2..], [64, 64]);
        assert_eq!(out.pyramid[2].img.shape()[2..], [32, 32]);
    }

    #[test]
    fn zero_voxel_gives_finite_embedding() {
        let mut rng = TrainRng::seed_from_u64(2);
        let cfg = small_cfg();
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let img = Tensor::from_array(randn_array(&mut rng, &[1, 1, 32, 32], 1.0));
        let vox = Tensor::zeros(&[1, 2, 2, 32, 32]);
        let out = enc.forward(&img, &vox).unwrap();
        assert!(out.embedding.to_array().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indivisible_dims_error() {
        let mut rng = TrainRng::seed_from_u64(3);
        let cfg = small_cfg();
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let img = Tensor::zeros(&[1, 1, 36, 36]);
        let vox = Tensor::zeros(&[1, 2, 2, 36, 36]);
        assert!(enc.forward(&img, &vox).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = TrainRng::seed_from_u64(4);
        let cfg = small_cfg();
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let img = Tensor::from_array(randn_array(&mut rng, &[1, 1, 32, 32], 1.0));
        let vox = Tensor::from_array(randn_array(&mut rng, &[1, 2, 2, 32, 32], 1.0));
        let a = enc.forward(&img, &vox).unwrap().embedding.to_array();
        let b = enc.forward(&img, &vox).unwrap().embedding.to_array();
        assert_eq!(a, b);
    }

    #[test]
    fn concat_fusion_has_no_event_branch() {
        let mut rng = TrainRng::seed_from_u64(5);
        let mut cfg = small_cfg();
        cfg.fusion = FusionMode::Concat;
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let img = Tensor::from_array(randn_array(&mut rng, &[1, 1, 32, 32], 1.0));
        let vox = Tensor::from_array(randn_array(&mut rng, &[1, 2, 2, 32, 32], 1.0));
        let out = enc.forward(&img, &vox).unwrap();
        assert!(out.pyramid[0].evt.is_none());
        assert_eq!(out.embedding.shape(), vec![1, 3, 4, 4]);
    }
}
