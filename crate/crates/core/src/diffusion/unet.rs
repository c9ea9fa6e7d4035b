//! Conditional denoising U-Net: the noisy latent is channel-concatenated
//! with the condition embeddings, a sinusoidal step embedding is added in
//! every residual block, and a small encoder/decoder with skip connections
//! predicts the noise.

use std::cell::Cell;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::blocks::{ResBlock, SelfAttention2d};
use crate::nn::layers::{join, Params};
use crate::nn::ops::upsample_nearest2d;
use crate::nn::{Conv2d, GroupNorm, Linear, Scalar, Tensor};
use crate::TrainRng;

use crate::hae::EMBED_CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub time_embed_dim: usize,
    pub res_blocks: usize,
    /// Condition embeddings concatenated to the noisy latent (2 for VFI,
    /// 1 for deblurring).
    pub n_conditions: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 96,
            channel_mult: vec![1, 2],
            time_embed_dim: 64,
            res_blocks: 2,
            n_conditions: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() {
            return Err(Error::config("unet needs at least one level".to_string()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even".to_string()));
        }
        if self.n_conditions == 0 {
            return Err(Error::config("unet needs at least one condition".to_string()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        EMBED_CHANNELS * (1 + self.n_conditions)
    }

    fn ch(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Paper-like width used by the parameter-count comparison.
    pub fn paper() -> Self {
        DenoiserConfig {
            base_channels: 128,
            channel_mult: vec![1, 2],
            time_embed_dim: 256,
            res_blocks: 2,
            n_conditions: 2,
        }
    }
}

thread_local! {
    static UNET_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Count denoiser forward evaluations inside `f` (sampler instrumentation).
pub fn count_unet_calls<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = UNET_CALLS.with(|c| c.get());
    let r = f();
    let after = UNET_CALLS.with(|c| c.get());
    (r, after - before)
}

fn sinusoidal_embedding<S: Scalar>(t: usize, dim: usize, n: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut row = vec![S::ZERO; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        let arg = t as f64 * freq;
        row[i] = S::from_f64(arg.sin());
        row[half + i] = S::from_f64(arg.cos());
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        data.extend_from_slice(&row);
    }
    Tensor::from_array(ArrayD::from_shape_vec(IxDyn(&[n, dim]), data).unwrap())
}

struct DownLevel<S: Scalar> {
    res: Vec<ResBlock<S>>,
    down: Option<Conv2d<S>>,
}

struct UpLevel<S: Scalar> {
    res: Vec<ResBlock<S>>,
    up: Option<Conv2d<S>>,
}

pub struct ConditionalUnet<S: Scalar> {
    cfg: DenoiserConfig,
    conv_in: Conv2d<S>,
    time_fc1: Linear<S>,
    time_fc2: Linear<S>,
    downs: Vec<DownLevel<S>>,
    mid_res1: ResBlock<S>,
    mid_attn: SelfAttention2d<S>,
    mid_res2: ResBlock<S>,
    ups: Vec<UpLevel<S>>, // deepest first
    out_norm: GroupNorm<S>,
    pub out_conv: Conv2d<S>,
}

impl<S: Scalar> ConditionalUnet<S> {
    pub fn new(cfg: &DenoiserConfig, rng: &mut TrainRng) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.channel_mult.len();
        let td = cfg.time_embed_dim;
        let mut downs = Vec::new();
        for l in 0..levels {
            let c_in = if l == 0 { cfg.ch(0) } else { cfg.ch(l - 1) };
            let mut res = Vec::new();
            for r in 0..cfg.res_blocks.max(1) {
                let ci = if r == 0 { c_in } else { cfg.ch(l) };
                res.push(ResBlock::new(rng, ci, cfg.ch(l), Some(td)));
            }
            downs.push(DownLevel {
                res,
                down: if l + 1 < levels {
                    Some(Conv2d::new(rng, cfg.ch(l), cfg.ch(l), 3, 2, 1))
                } else {
                    None
                },
            });
        }
        let deep = cfg.ch(levels - 1);
        let mut ups = Vec::new();
        for l in (0..levels).rev() {
            let mut res = Vec::new();
            for r in 0..cfg.res_blocks.max(1) {
                let ci = if r == 0 { cfg.ch(l) * 2 } else { cfg.ch(l) };
                res.push(ResBlock::new(rng, ci, cfg.ch(l), Some(td)));
            }
            ups.push(UpLevel {
                res,
                up: if l > 0 {
                    Some(Conv2d::new(rng, cfg.ch(l), cfg.ch(l - 1), 3, 1, 1))
                } else {
                    None
                },
            });
        }
        Ok(ConditionalUnet {
            cfg: cfg.clone(),
            conv_in: Conv2d::new(rng, cfg.in_channels(), cfg.ch(0), 3, 1, 1),
            time_fc1: Linear::new(rng, td, td),
            time_fc2: Linear::new(rng, td, td),
            downs,
            mid_res1: ResBlock::new(rng, deep, deep, Some(td)),
            mid_attn: SelfAttention2d::new(rng, deep),
            mid_res2: ResBlock::new(rng, deep, deep, Some(td)),
            ups,
            out_norm: GroupNorm::new(cfg.ch(0)),
            out_conv: Conv2d::zeros(cfg.ch(0), EMBED_CHANNELS, 3, 1, 1),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// `z_t`: `(N, 3, h, w)`; `conds`: `n_conditions` embeddings of the same
    /// shape; returns predicted noise of the same shape.
    pub fn forward(&self, z_t: &Tensor<S>, t: usize, conds: &[Tensor<S>]) -> Result<Tensor<S>> {
        let zs = z_t.shape();
        if zs.len() != 4 || zs[1] != EMBED_CHANNELS {
            return Err(Error::domain(format!(
                "unet expects (N, {EMBED_CHANNELS}, h, w), got {zs:?}"
            )));
        }
        if conds.len() != self.cfg.n_conditions {
            return Err(Error::domain(format!(
                "unet wants {} conditions, got {}",
                self.cfg.n_conditions,
                conds.len()
            )));
        }
        for c in conds {
            if c.shape() != zs {
                return Err(Error::domain(format!(
                    "condition shape {:?} does not match latent {zs:?}",
                    c.shape()
                )));
            }
        }
        let levels = self.cfg.channel_mult.len();
        let factor = 1usize << (levels - 1);
        if zs[2] % factor != 0 || zs[3] % factor != 0 {
            return Err(Error::domain(format!(
                "latent {}x{} not divisible by 2^(levels-1) = {factor}",
                zs[2], zs[3]
            )));
        }
        UNET_CALLS.with(|c| c.set(c.get() + 1));

        let temb = sinusoidal_embedding::<S>(t, self.cfg.time_embed_dim, zs[0]);
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&temb).silu());

        let mut parts = vec![z_t.clone()];
        parts.extend(conds.iter().cloned());
        let mut x = self.conv_in.forward(&Tensor::concat(1, &parts));

        let mut skips = Vec::with_capacity(levels);
        for level in &self.downs {
            for rb in &level.res {
                x = rb.forward(&x, Some(&temb));
            }
            skips.push(x.clone());
            if let Some(d) = &level.down {
                x = d.forward(&x);
            }
        }
        x = self.mid_res1.forward(&x, Some(&temb));
        x = self.mid_attn.forward(&x);
        x = self.mid_res2.forward(&x, Some(&temb));

        for (i, level) in self.ups.iter().enumerate() {
            let skip = &skips[levels - 1 - i];
            x = Tensor::concat(1, &[x, skip.clone()]);
            for rb in &level.res {
                x = rb.forward(&x, Some(&temb));
            }
            if let Some(up) = &level.up {
                x = up.forward(&upsample_nearest2d(&x, 2));
            }
        }
        Ok(self.out_conv.forward(&self.out_norm.forward(&x).silu()))
    }
}

impl<S: Scalar> Params<S> for ConditionalUnet<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.conv_in.collect(&join(prefix, "conv_in"), out);
        self.time_fc1.collect(&join(prefix, "time_fc1"), out);
        self.time_fc2.collect(&join(prefix, "time_fc2"), out);
        for (i, d) in self.downs.iter().enumerate() {
            for (r, rb) in d.res.iter().enumerate() {
                rb.collect(&join(prefix, &format!("down{i}.res{r}")), out);
            }
            if let Some(c) = &d.down {
                c.collect(&join(prefix, &format!("down{i}.down")), out);
            }
        }
        self.mid_res1.collect(&join(prefix, "mid_res1"), out);
        self.mid_attn.collect(&join(prefix, "mid_attn"), out);
        self.mid_res2.collect(&join(prefix, "mid_res2"), out);
        for (i, u) in self.ups.iter().enumerate() {
            for (r, rb) in u.res.iter().enumerate() {
                rb.collect(&join(prefix, &format!("up{i}.res{r}")), out);
            }
            if let Some(c) = &u.up {
                c.collect(&join(prefix, &format!("up{i}.up")), out);
            }
        }
        self.out_norm.collect(&join(prefix, "out_norm"), out);
        self.out_conv.collect(&join(prefix, "out_conv"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample};
    use crate::nn::layers::randn_array;
    use rand::SeedableRng;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            channel_mult: vec![1, 2],
            time_embed_dim: 8,
            res_blocks: 1,
            n_conditions: 2,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = TrainRng::seed_from_u64(1);
        let unet = ConditionalUnet::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let z = Tensor::from_array(randn_array(&mut rng, &[2, 3, 8, 8], 1.0));
        let c0 = Tensor::from_array(randn_array(&mut rng, &[2, 3, 8, 8], 1.0));
        let c1 = Tensor::from_array(randn_array(&mut rng, &[2, 3, 8, 8], 1.0));
        let out = unet.forward(&z, 3, &[c0, c1]).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 8, 8]);
    }

    #[test]
    fn deterministic_eval() {
        let mut rng = TrainRng::seed_from_u64(2);
        let unet = ConditionalUnet::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let z = Tensor::from_array(randn_array(&mut rng, &[1, 3, 8, 8], 1.0));
        let c0 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 8, 8], 1.0));
        let c1 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 8, 8], 1.0));
        let a = unet.forward(&z, 1, &[c0.clone(), c1.clone()]).unwrap();
        let b = unet.forward(&z, 1, &[c0, c1]).unwrap();
        assert_eq!(a.to_array(), b.to_array());
    }

    #[test]
    fn sampler_runs_exactly_t_steps() {
        let mut rng = TrainRng::seed_from_u64(3);
        let unet = ConditionalUnet::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let sched = make_schedule(5, 1e-5, 0.1).unwrap();
        let c0 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 8, 8], 1.0));
        let c1 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 8, 8], 1.0));
        let ((), calls) = count_unet_calls(|| {
            sample(&unet, &[c0.clone(), c1.clone()], &sched, &mut rng).map(|_| ()).unwrap();
        });
        assert_eq!(calls, 5);
    }

    #[test]
    fn sampler_is_seed_deterministic_and_shape_preserving() {
        let mut rng = TrainRng::seed_from_u64(4);
        let unet = ConditionalUnet::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let sched = make_schedule(5, 1e-5, 0.1).unwrap();
        let c0 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 4, 4], 1.0));
        let c1 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 4, 4], 1.0));
        let mut r1 = TrainRng::seed_from_u64(99);
        let mut r2 = TrainRng::seed_from_u64(99);
        let a = sample(&unet, &[c0.clone(), c1.clone()], &sched, &mut r1).unwrap();
        let b = sample(&unet, &[c0, c1], &sched, &mut r2).unwrap();
        assert_eq!(a.to_array(), b.to_array());
        assert_eq!(a.shape(), vec![1, 3, 4, 4]);
    }

    #[test]
    fn unet_gradient_check() {
        use crate::nn::gradcheck::check_gradients;
        let mut rng = TrainRng::seed_from_u64(5);
        let cfg = DenoiserConfig {
            base_channels: 4,
            channel_mult: vec![1, 2],
            time_embed_dim: 4,
            res_blocks: 1,
            n_conditions: 2,
        };
        let unet = ConditionalUnet::<f64>::new(&cfg, &mut rng).unwrap();
        // randomize the zero-initialized output conv so its input gradients
        // are informative
        unet.out_conv
            .weight
            .set_value(randn_array(&mut rng, &unet.out_conv.weight.shape(), 0.3));
        let z = Tensor::param(randn_array(&mut rng, &[1, 3, 4, 4], 0.5));
        let c0 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 4, 4], 0.5));
        let c1 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 4, 4], 0.5));
        let mut params = vec![z.clone()];
        params.extend(unet.params());
        let f = {
            let (unet, z, c0, c1) = (unet, z.clone(), c0.clone(), c1.clone());
            move || {
                unet.forward(&z, 2, &[c0.clone(), c1.clone()])
                    .unwrap()
                    .powi(2)
                    .mean_all()
            }
        };
        let rep = check_gradients(&params, f, 1e-5, Some(25), 7);
        assert!(
            rep.max_rel_err <= 1e-3,
            "max rel err {} over {}",
            rep.max_rel_err,
            rep.checked
        );
    }
}
