//! Residual and self-attention building blocks shared by the autoencoder
//! and the denoising U-Net.

use crate::nn::layers::{join, Params};
use crate::nn::{Conv2d, GroupNorm, Linear, Scalar, Tensor};
use crate::TrainRng;

/// GroupNorm -> SiLU -> conv x2 with a learned skip on channel change and an
/// optional per-channel time-embedding shift between the convs.
pub struct ResBlock<S: Scalar> {
    norm1: GroupNorm<S>,
    conv1: Conv2d<S>,
    norm2: GroupNorm<S>,
    conv2: Conv2d<S>,
    skip: Option<Conv2d<S>>,
    time_proj: Option<Linear<S>>,
    c_out: usize,
}

impl<S: Scalar> ResBlock<S> {
    pub fn new(rng: &mut TrainRng, c_in: usize, c_out: usize, time_dim: Option<usize>) -> Self {
        ResBlock {
            norm1: GroupNorm::new(c_in),
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1),
            norm2: GroupNorm::new(c_out),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            skip: if c_in != c_out {
                Some(Conv2d::new(rng, c_in, c_out, 1, 1, 0))
            } else {
                None
            },
            time_proj: time_dim.map(|d| Linear::new(rng, d, c_out)),
            c_out,
        }
    }

    /// `x`: `(N, C, H, W)`; `temb`: `(N, time_dim)` when configured.
    pub fn forward(&self, x: &Tensor<S>, temb: Option<&Tensor<S>>) -> Tensor<S> {
        let mut h = self.conv1.forward(&self.norm1.forward(x).silu());
        if let (Some(proj), Some(t)) = (&self.time_proj, temb) {
            let n = t.shape()[0];
            let shift = proj.forward(&t.silu()).reshape(&[n, self.c_out, 1, 1]);
            h = h.add(&shift);
        }
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        match &self.skip {
            Some(s) => h.add(&s.forward(x)),
            None => h.add(x),
        }
    }
}

impl<S: Scalar> Params<S> for ResBlock<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        if let Some(s) = &self.skip {
            s.collect(&join(prefix, "skip"), out);
        }
        if let Some(t) = &self.time_proj {
            t.collect(&join(prefix, "time_proj"), out);
        }
    }
}

/// Single-head full spatial self-attention with a zero-initialized output
/// projection (identity at init). Used at the bottleneck where maps are
/// small.
pub struct SelfAttention2d<S: Scalar> {
    norm: GroupNorm<S>,
    q: Conv2d<S>,
    k: Conv2d<S>,
    v: Conv2d<S>,
    out: Conv2d<S>,
}

impl<S: Scalar> SelfAttention2d<S> {
    pub fn new(rng: &mut TrainRng, c: usize) -> Self {
        SelfAttention2d {
            norm: GroupNorm::new(c),
            q: Conv2d::new(rng, c, c, 1, 1, 0),
            k: Conv2d::new(rng, c, c, 1, 1, 0),
            v: Conv2d::new(rng, c, c, 1, 1, 0),
            out: Conv2d::zeros(c, c, 1, 1, 0),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xn = self.norm.forward(x);
        let tokens = |t: &Tensor<S>| t.reshape(&[n, c, h * w]).permute(&[0, 2, 1]);
        let q = tokens(&self.q.forward(&xn));
        let k = tokens(&self.k.forward(&xn));
        let v = tokens(&self.v.forward(&xn));
        let scale = S::from_f64(1.0 / (c as f64).sqrt());
        let alpha = q.bmm(&k.permute(&[0, 2, 1])).scale(scale).softmax(2);
        let agg = alpha.bmm(&v).permute(&[0, 2, 1]).reshape(&[n, c, h, w]);
        self.out.forward(&agg).add(x)
    }
}

impl<S: Scalar> Params<S> for SelfAttention2d<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.norm.collect(&join(prefix, "norm"), out);
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.out.collect(&join(prefix, "out"), out);
    }
}

/// Mean absolute error as a scalar tensor.
pub fn l1_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    a.sub(b).abs().mean_all()
}

/// Mean squared error as a scalar tensor.
pub fn mse_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    a.sub(b).powi(2).mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::randn_array;
    use rand::SeedableRng;

    #[test]
    fn resblock_shapes_and_channel_change() {
        let mut rng = TrainRng::seed_from_u64(1);
        let rb = ResBlock::<f32>::new(&mut rng, 8, 16, None);
        let x = Tensor::from_array(randn_array(&mut rng, &[2, 8, 8, 8], 1.0));
        assert_eq!(rb.forward(&x, None).shape(), vec![2, 16, 8, 8]);
    }

    #[test]
    fn self_attention_identity_at_init() {
        let mut rng = TrainRng::seed_from_u64(2);
        let attn = SelfAttention2d::<f64>::new(&mut rng, 8);
        let x = Tensor::from_array(randn_array(&mut rng, &[1, 8, 4, 4], 1.0));
        let y = attn.forward(&x);
        let diff = y
            .to_array()
            .iter()
            .zip(x.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn losses_match_hand_reductions() {
        let a = Tensor::<f64>::from_array(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), vec![0.0, 1.0, 2.0, 3.0])
                .unwrap(),
        );
        let b = Tensor::<f64>::zeros(&[4]);
        assert!((l1_loss(&a, &b).item() - 1.5).abs() < 1e-12);
        assert!((mse_loss(&a, &b).item() - 3.5).abs() < 1e-12);
    }
}
