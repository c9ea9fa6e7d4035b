//! Adam optimizer with a step-decay learning-rate schedule.

use ndarray::ArrayD;

use super::tensor::{Scalar, Tensor};

pub struct Adam<S: Scalar> {
    params: Vec<Tensor<S>>,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: Vec<Tensor<S>>, lr: f64) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::from_elem(p.value().raw_dim(), S::ZERO))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::from_elem(p.value().raw_dim(), S::ZERO))
            .collect();
        Adam {
            params,
            m,
            v,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = S::from_f64(self.lr / bc1);
        let bc2_sqrt_inv = S::from_f64(1.0 / bc2.sqrt());
        let eps = S::from_f64(self.eps);

        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            p.update_value(|val| {
                let xs = val.as_slice_mut().unwrap();
                for j in 0..xs.len() {
                    ms[j] = b1 * ms[j] + one_m_b1 * gs[j];
                    vs[j] = b2 * vs[j] + one_m_b2 * gs[j] * gs[j];
                    let vhat_sqrt = (vs[j] * bc2_sqrt_inv * bc2_sqrt_inv).sqrt();
                    xs[j] -= step_size * ms[j] / (vhat_sqrt + eps);
                }
            });
            p.zero_grad();
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
