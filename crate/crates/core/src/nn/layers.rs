//! Parameterized layers and weight initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{conv2d, depthwise_conv2d};
use super::tensor::{Scalar, Tensor};
use crate::TrainRng;

/// Anything that owns parameters. Names are hierarchical
/// (`encoder.block0.res0.conv1.weight`) and stable across runs, which is what
/// the checkpoint container keys on.
pub trait Params<S: Scalar> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>);

    fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params(&self) -> Vec<Tensor<S>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn freeze(&self) {
        for p in self.params() {
            p.set_trainable(false);
        }
    }

    fn unfreeze(&self) {
        for p in self.params() {
            p.set_trainable(true);
        }
    }

    fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Copy parameter values from `src` into `dst`; both must expose identical
/// name/shape sets (e.g. two instances built from the same config).
pub fn copy_params<S: Scalar>(dst: &impl Params<S>, src: &impl Params<S>) {
    let from = src.named_params();
    let to = dst.named_params();
    assert_eq!(from.len(), to.len(), "parameter set size mismatch");
    for ((fname, ft), (tname, tt)) in from.iter().zip(to.iter()) {
        assert_eq!(fname, tname, "parameter name mismatch");
        tt.set_value(ft.to_array());
    }
}

pub fn randn_array<S: Scalar>(rng: &mut TrainRng, shape: &[usize], std: f64) -> ArrayD<S> {
    let normal = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(normal.sample(rng)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform_array<S: Scalar>(rng: &mut TrainRng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.random_range(lo..hi)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        rng: &mut TrainRng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Tensor::param(randn_array(rng, &[c_out, c_in, k, k], std)),
            bias: Some(Tensor::param(ArrayD::from_elem(IxDyn(&[c_out]), S::ZERO))),
            stride,
            pad,
        }
    }

    /// Zero-initialized variant; used for output projections so new blocks
    /// start as identities.
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Tensor::param(ArrayD::from_elem(IxDyn(&[c_out, c_in, k, k]), S::ZERO)),
            bias: Some(Tensor::param(ArrayD::from_elem(IxDyn(&[c_out]), S::ZERO))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

impl<S: Scalar> Params<S> for Conv2d<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

pub struct DepthwiseConv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> DepthwiseConv2d<S> {
    pub fn new(rng: &mut TrainRng, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let std = (2.0 / (k * k) as f64).sqrt();
        DepthwiseConv2d {
            weight: Tensor::param(randn_array(rng, &[c, k, k], std)),
            bias: Tensor::param(ArrayD::from_elem(IxDyn(&[c]), S::ZERO)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        depthwise_conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

impl<S: Scalar> Params<S> for DepthwiseConv2d<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>, // (in, out)
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(rng: &mut TrainRng, d_in: usize, d_out: usize) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        Linear {
            weight: Tensor::param(randn_array(rng, &[d_in, d_out], std)),
            bias: Tensor::param(ArrayD::from_elem(IxDyn(&[d_out]), S::ZERO)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::param(ArrayD::from_elem(IxDyn(&[d_in, d_out]), S::ZERO)),
            bias: Tensor::param(ArrayD::from_elem(IxDyn(&[d_out]), S::ZERO)),
        }
    }

    /// `x`: `(B, d_in)` -> `(B, d_out)`.
    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        x.matmul(&self.weight).add(&self.bias)
    }
}

impl<S: Scalar> Params<S> for Linear<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Largest group count <= 8 that divides the channel count.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

pub struct GroupNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub groups: usize,
    pub eps: S,
}

impl<S: Scalar> GroupNorm<S> {
    pub fn new(channels: usize) -> Self {
        let groups = norm_groups(channels);
        GroupNorm {
            gamma: Tensor::param(ArrayD::from_elem(IxDyn(&[1, channels, 1, 1]), S::ONE)),
            beta: Tensor::param(ArrayD::from_elem(IxDyn(&[1, channels, 1, 1]), S::ZERO)),
            groups,
            eps: S::from_f64(1e-5),
        }
    }

    /// `x`: `(N, C, H, W)`.
    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        super::ops::group_norm(x, &self.gamma, &self.beta, self.groups, self.eps)
    }
}

impl<S: Scalar> Params<S> for GroupNorm<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}
