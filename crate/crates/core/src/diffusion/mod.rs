//! Latent diffusion over ground-truth embeddings: linear variance schedule,
//! closed-form forward noising, deterministic reverse updates, the T-step
//! sampler, and the stage-2 losses.

pub mod unet;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::blocks::{l1_loss, mse_loss};
use crate::nn::{Scalar, Tensor};
use crate::TrainRng;

pub use unet::{count_unet_calls, ConditionalUnet, DenoiserConfig};

/// Serializable schedule parameters; `build` expands them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_steps: 5,
            beta_start: 1e-5,
            beta_end: 0.1,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end)
    }

    pub fn with_steps(&self, t_steps: usize) -> ScheduleSpec {
        ScheduleSpec { t_steps, ..*self }
    }
}

/// Variance schedule with its derived quantities; `t` is 1-based,
/// `alpha_bar(0) = 1` by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Betas linearly spaced inclusive over `[beta_start, beta_end]`;
/// a single step degenerates to `[beta_start]`.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::domain("schedule needs at least one step".to_string()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::domain(format!(
            "invalid beta bounds: need 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let beta: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_steps,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(Error::domain(format!(
                "step {t} outside 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Closed-form forward process: `sqrt(a_bar_t) z + sqrt(1 - a_bar_t) eps`.
/// `t = 0` is the identity (the `alpha_bar(0) = 1` convention).
pub fn forward_diffuse<S: Scalar>(
    z_gt: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t == 0 {
        return Ok(z_gt.clone());
    }
    sched.check_t(t)?;
    if eps.shape() != z_gt.shape() {
        return Err(Error::domain(format!(
            "noise shape {:?} does not match embedding {:?}",
            eps.shape(),
            z_gt.shape()
        )));
    }
    let ab = sched.alpha_bar_at(t);
    Ok(z_gt
        .scale(S::from_f64(ab.sqrt()))
        .add(&eps.scale(S::from_f64((1.0 - ab).sqrt()))))
}

/// Deterministic reverse update:
/// `(z_t - ((1 - a_t) / sqrt(1 - a_bar_t)) eps_hat) / sqrt(a_t)`.
/// No noise is injected; the sampler is fully deterministic.
pub fn denoise_step<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if eps_hat.shape() != z_t.shape() {
        return Err(Error::domain(format!(
            "predicted-noise shape {:?} does not match sample {:?}",
            eps_hat.shape(),
            z_t.shape()
        )));
    }
    let a = sched.alpha[t - 1];
    let ab = sched.alpha_bar_at(t);
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    Ok(z_t
        .sub(&eps_hat.scale(S::from_f64(coef)))
        .scale(S::from_f64(1.0 / a.sqrt())))
}

/// Standard-normal tensor of the given shape.
pub fn sample_noise<S: Scalar>(rng: &mut TrainRng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_array(crate::nn::layers::randn_array(rng, shape, 1.0))
}

/// Full reverse pass from pure Gaussian noise, conditioned on the boundary
/// embeddings; runs `sched.t_steps` denoiser evaluations.
pub fn sample<S: Scalar>(
    unet: &ConditionalUnet<S>,
    conds: &[Tensor<S>],
    sched: &NoiseSchedule,
    rng: &mut TrainRng,
) -> Result<Tensor<S>> {
    let shape = conds
        .first()
        .ok_or_else(|| Error::domain("sampler needs at least one condition".to_string()))?
        .shape();
    let z_init = sample_noise::<S>(rng, &shape);
    unroll(unet, &z_init, conds, sched)
}

/// The shared T-step unroll used by both training and inference.
pub fn unroll<S: Scalar>(
    unet: &ConditionalUnet<S>,
    z_init: &Tensor<S>,
    conds: &[Tensor<S>],
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    let mut z = z_init.clone();
    for t in (1..=sched.t_steps).rev() {
        let eps_hat = unet.forward(&z, t, conds)?;
        z = denoise_step(&z, t, &eps_hat, sched)?;
    }
    Ok(z)
}

/// Direct denoised-embedding loss: L1 between the unrolled estimate and the
/// ground-truth embedding.
pub fn dm_loss<S: Scalar>(z_hat: &Tensor<S>, z_gt: &Tensor<S>) -> Result<Tensor<S>> {
    if z_hat.shape() != z_gt.shape() {
        return Err(Error::domain("dm_loss shape mismatch".to_string()));
    }
    Ok(l1_loss(z_hat, z_gt))
}

/// Per-step noise-matching objective (ablation V2 only).
pub fn traditional_dm_loss<S: Scalar>(eps: &Tensor<S>, eps_hat: &Tensor<S>) -> Result<Tensor<S>> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::domain("traditional_dm_loss shape mismatch".to_string()));
    }
    Ok(mse_loss(eps, eps_hat))
}

/// Joint stage-2 objective: image L1 plus embedding L1.
pub fn stage2_loss<S: Scalar>(
    i_hat: &Tensor<S>,
    i_gt: &Tensor<S>,
    z_hat: &Tensor<S>,
    z_gt: &Tensor<S>,
) -> Result<Tensor<S>> {
    if i_hat.shape() != i_gt.shape() || z_hat.shape() != z_gt.shape() {
        return Err(Error::domain("stage2_loss shape mismatch".to_string()));
    }
    Ok(l1_loss(i_hat, i_gt).add(&l1_loss(z_hat, z_gt)))
}

/// One step of the Markov forward kernel (used by the equivalence check and
/// tests; training always uses the closed form).
pub fn forward_kernel_step<S: Scalar>(
    z_prev: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let b = sched.beta[t - 1];
    Ok(z_prev
        .scale(S::from_f64((1.0 - b).sqrt()))
        .add(&eps.scale(S::from_f64(b.sqrt()))))
}

pub fn zeros_like<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::from_array(ArrayD::from_elem(IxDyn(shape), S::ZERO))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn schedule_matches_hand_spacing() {
        let s = make_schedule(5, 1e-5, 0.1).unwrap();
        let expect = [1e-5, 0.0250075, 0.050005, 0.0750025, 0.1];
        for (a, b) in s.beta.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // product oracle for alpha_bar at T
        let prod: f64 = expect.iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bar_at(5) - prod).abs() < 1e-15);
        assert!((s.alpha_bar_at(5) - 0.7711).abs() < 1e-4);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1e-5, 0.1).unwrap();
        assert_eq!(s.beta, vec![1e-5]);
        assert!((s.alpha_bar_at(1) - 0.99999).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-5, 0.1).is_err());
        assert!(make_schedule(5, 0.0, 0.1).is_err());
        assert!(make_schedule(5, 0.2, 0.1).is_err());
        assert!(make_schedule(5, 0.5, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_monotone_and_complementary() {
        let s = make_schedule(5, 1e-5, 0.1).unwrap();
        for t in 1..=5 {
            assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            let ab = s.alpha_bar_at(t);
            let signal = ab.sqrt().powi(2);
            let noise = (1.0 - ab).sqrt().powi(2);
            assert!((signal + noise - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = make_schedule(5, 1e-5, 0.1).unwrap();
        let mut rng = TrainRng::seed_from_u64(1);
        let z = sample_noise::<f64>(&mut rng, &[3, 4, 4]);
        let zero = zeros_like::<f64>(&[3, 4, 4]);
        // eps = 0 -> sqrt(a_bar) z
        let noised = forward_diffuse(&z, 3, &zero, &s).unwrap();
        let scale = s.alpha_bar_at(3).sqrt();
        for (a, b) in noised.to_array().iter().zip(z.to_array().iter()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        // t = 0 passthrough
        let same = forward_diffuse(&z, 0, &zero, &s).unwrap();
        assert_eq!(same.to_array(), z.to_array());
        // z = 0 -> sqrt(1 - a_bar) eps
        let eps = sample_noise::<f64>(&mut rng, &[3, 4, 4]);
        let pure = forward_diffuse(&zero, 5, &eps, &s).unwrap();
        let nscale = (1.0 - s.alpha_bar_at(5)).sqrt();
        for (a, b) in pure.to_array().iter().zip(eps.to_array().iter()) {
            assert!((a - b * nscale).abs() < 1e-12);
        }
        // out of range
        assert!(forward_diffuse(&z, 6, &zero, &s).is_err());
    }

    #[test]
    fn one_step_inversion_is_exact() {
        // a_bar_1 = a_1, so denoising with the true noise recovers z exactly
        let s = make_schedule(5, 1e-5, 0.1).unwrap();
        let mut rng = TrainRng::seed_from_u64(2);
        let z = sample_noise::<f64>(&mut rng, &[3, 8, 8]);
        let eps = sample_noise::<f64>(&mut rng, &[3, 8, 8]);
        let z1 = forward_diffuse(&z, 1, &eps, &s).unwrap();
        let back = denoise_step(&z1, 1, &eps, &s).unwrap();
        let max = back
            .to_array()
            .iter()
            .zip(z.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-6, "max abs err {max}");
    }

    #[test]
    fn denoise_step_cases() {
        let s = make_schedule(5, 1e-5, 0.1).unwrap();
        let mut rng = TrainRng::seed_from_u64(3);
        let z = sample_noise::<f64>(&mut rng, &[3, 2, 2]);
        let zero = zeros_like::<f64>(&[3, 2, 2]);
        // eps_hat = 0 -> z / sqrt(alpha_t)
        let out = denoise_step(&z, 4, &zero, &s).unwrap();
        let scale = 1.0 / s.alpha[3].sqrt();
        for (a, b) in out.to_array().iter().zip(z.to_array().iter()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        // linear in eps_hat with the affine coefficient
        let eps = sample_noise::<f64>(&mut rng, &[3, 2, 2]);
        let o1 = denoise_step(&z, 4, &eps, &s).unwrap();
        let o2 = denoise_step(&z, 4, &eps.scale(2.0), &s).unwrap();
        let coef = (1.0 - s.alpha[3]) / (s.alpha[3].sqrt() * (1.0 - s.alpha_bar_at(4)).sqrt());
        for ((a, b), e) in o2
            .to_array()
            .iter()
            .zip(o1.to_array().iter())
            .zip(eps.to_array().iter())
        {
            assert!((a - b + coef * e).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_match_oracles() {
        let mut rng = TrainRng::seed_from_u64(4);
        let a = sample_noise::<f64>(&mut rng, &[3, 4, 4]);
        let b = sample_noise::<f64>(&mut rng, &[3, 4, 4]);
        let l1_ref: f64 = a
            .to_array()
            .iter()
            .zip(b.to_array().iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 48.0;
        assert!((dm_loss(&a, &b).unwrap().item() - l1_ref).abs() < 1e-12);
        let mse_ref: f64 = a
            .to_array()
            .iter()
            .zip(b.to_array().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 48.0;
        assert!((traditional_dm_loss(&a, &b).unwrap().item() - mse_ref).abs() < 1e-12);
        // offsets
        let c = a.add_scalar(0.37);
        assert!((dm_loss(&c, &a).unwrap().item() - 0.37).abs() < 1e-12);
        assert!((traditional_dm_loss(&c, &a).unwrap().item() - 0.37 * 0.37).abs() < 1e-12);
        // stage-2 loss is the sum of the two L1 terms
        let img_a = sample_noise::<f64>(&mut rng, &[1, 8, 8]);
        let img_b = sample_noise::<f64>(&mut rng, &[1, 8, 8]);
        let total = stage2_loss(&img_a, &img_b, &a, &b).unwrap().item();
        let expect = l1_loss(&img_a, &img_b).item() + l1_ref;
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn iterated_kernel_matches_closed_form_moments() {
        // per-element mean/variance agreement within 3 standard errors
        let s = make_schedule(5, 1e-5, 0.1).unwrap();
        let mut rng = TrainRng::seed_from_u64(5);
        let z = sample_noise::<f64>(&mut rng, &[4]);
        let n = 20_000usize;
        for t in 1..=5 {
            let mut acc_mean = vec![0.0f64; 4];
            let mut acc_sq = vec![0.0f64; 4];
            for _ in 0..n {
                let mut zi = z.clone();
                for step in 1..=t {
                    let eps = sample_noise::<f64>(&mut rng, &[4]);
                    zi = forward_kernel_step(&zi, step, &eps, &s).unwrap();
                }
                let v = zi.to_array();
                for (i, &x) in v.iter().enumerate() {
                    acc_mean[i] += x;
                    acc_sq[i] += x * x;
                }
            }
            let ab = s.alpha_bar_at(t);
            let want_var = 1.0 - ab;
            for i in 0..4 {
                let mean = acc_mean[i] / n as f64;
                let var = acc_sq[i] / n as f64 - mean * mean;
                let want_mean = ab.sqrt() * z.to_array()[i];
                let se_mean = want_var.sqrt() / (n as f64).sqrt();
                let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
                assert!(
                    (mean - want_mean).abs() < 3.0 * se_mean,
                    "t={t} i={i}: mean {mean} vs {want_mean} (se {se_mean})"
                );
                assert!(
                    (var - want_var).abs() < 3.0 * se_var,
                    "t={t} i={i}: var {var} vs {want_var} (se {se_var})"
                );
            }
        }
    }
}
