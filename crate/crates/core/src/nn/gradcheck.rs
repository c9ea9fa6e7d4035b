//! Central finite-difference gradient verification.
//!
//! Runs at `f64`. For each checked element the analytic gradient from one
//! backward pass is compared against `(f(x+h) - f(x-h)) / 2h`. Used by the
//! per-block unit tests and the acceptance suite.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::tensor::{no_grad, Tensor};
use crate::TrainRng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic vs numeric gradients of `forward()` (a deterministic
/// scalar-valued closure) w.r.t. every tensor in `params`.
///
/// `max_per_param` caps the number of elements probed per tensor (random
/// subset, seeded); `None` sweeps everything.
pub fn check_gradients(
    params: &[Tensor<f64>],
    forward: impl Fn() -> Tensor<f64>,
    eps: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> GradCheckReport {
    for p in params {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward();
    let analytic: Vec<_> = params.iter().map(|p| p.grad()).collect();

    let mut rng = TrainRng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;

    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let mut idxs: Vec<usize> = (0..n).collect();
        if let Some(cap) = max_per_param {
            if n > cap {
                idxs.shuffle(&mut rng);
                idxs.truncate(cap);
            }
        }
        let ana = analytic[pi].clone();
        for idx in idxs {
            let x0 = p.value().as_slice().unwrap()[idx];
            let h = eps * x0.abs().max(1.0);

            p.update_value(|v| v.as_slice_mut().unwrap()[idx] = x0 + h);
            let lp = no_grad(|| forward().item());
            p.update_value(|v| v.as_slice_mut().unwrap()[idx] = x0 - h);
            let lm = no_grad(|| forward().item());
            p.update_value(|v| v.as_slice_mut().unwrap()[idx] = x0);

            let numeric = (lp - lm) / (2.0 * h);
            let a = ana
                .as_ref()
                .map(|g| g.as_slice().unwrap()[idx])
                .unwrap_or(0.0);
            let denom = numeric.abs().max(a.abs()).max(1e-6);
            let rel = (numeric - a).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    for p in params {
        p.zero_grad();
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked,
    }
}
