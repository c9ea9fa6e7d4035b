//! Vector quantization of the 3-channel latent with the straight-through
//! estimator and the standard two-term codebook/commitment objective.


use crate::error::{Error, Result};
use crate::nn::blocks::mse_loss;
use crate::nn::layers::{join, uniform_array, Params};
use crate::nn::{Scalar, Tensor};
use crate::TrainRng;

use super::{HAEConfig, EMBED_CHANNELS};

pub struct QuantizeResult<S: Scalar> {
    /// Straight-through quantized latent: values are exact codebook rows,
    /// gradients pass through to the input unchanged.
    pub z_q: Tensor<S>,
    /// `||sg[z] - z_q||^2 + beta * ||z - sg[z_q]||^2`.
    pub vq_loss: Tensor<S>,
    /// Selected codebook row per spatial position, row-major `(N, h, w)`.
    pub indices: Vec<usize>,
}

pub struct VectorQuantizer<S: Scalar> {
    pub codebook: Tensor<S>, // (K, 3)
    pub beta: f64,
}

impl<S: Scalar> VectorQuantizer<S> {
    pub fn new(cfg: &HAEConfig, rng: &mut TrainRng) -> Self {
        let k = cfg.codebook_size;
        let bound = 1.0 / k as f64;
        VectorQuantizer {
            codebook: Tensor::param(uniform_array(rng, &[k, EMBED_CHANNELS], -bound, bound)),
            beta: cfg.commitment_beta,
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    /// Nearest codebook entry per spatial position (Euclidean).
    pub fn quantize(&self, z: &Tensor<S>) -> Result<QuantizeResult<S>> {
        let zs = z.shape();
        if zs.len() != 4 || zs[1] != EMBED_CHANNELS {
            return Err(Error::domain(format!(
                "quantize expects (N, {EMBED_CHANNELS}, h, w), got {zs:?}"
            )));
        }
        let (n, c, h, w) = (zs[0], zs[1], zs[2], zs[3]);
        let flat = z.permute(&[0, 2, 3, 1]).reshape(&[n * h * w, c]);

        let indices = {
            let fv = flat.value();
            let f = fv.as_slice().unwrap();
            let cbv = self.codebook.value();
            let cb = cbv.as_slice().unwrap();
            let k = self.codebook_size();
            (0..n * h * w)
                .map(|row| {
                    let zrow = &f[row * c..(row + 1) * c];
                    let mut best = 0usize;
                    let mut best_d = S::from_f64(f64::INFINITY);
                    for ki in 0..k {
                        let crow = &cb[ki * c..(ki + 1) * c];
                        let mut d = S::ZERO;
                        for j in 0..c {
                            let diff = zrow[j] - crow[j];
                            d += diff * diff;
                        }
                        if d < best_d {
                            best_d = d;
                            best = ki;
                        }
                    }
                    best
                })
                .collect::<Vec<_>>()
        };

        let gathered = self.codebook.index_select0(&indices);
        let codebook_term = mse_loss(&flat.detach(), &gathered);
        let commit_term = mse_loss(&flat, &gathered.detach()).scale(S::from_f64(self.beta));
        let vq_loss = codebook_term.add(&commit_term);

        // straight-through: value of the codebook rows, gradient of z
        let st = flat.add(&gathered.sub(&flat).detach());
        let z_q = st.reshape(&[n, h, w, c]).permute(&[0, 3, 1, 2]);
        Ok(QuantizeResult {
            z_q,
            vq_loss,
            indices,
        })
    }
}

impl<S: Scalar> Params<S> for VectorQuantizer<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join(prefix, "codebook"), self.codebook.clone()));
    }
}
