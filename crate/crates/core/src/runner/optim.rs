//! Cosine learning-rate schedule and Adam.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`; the endpoints are
/// returned exactly.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step == 0 || total == 0 {
        return lr_max;
    }
    if step >= total {
        return lr_min;
    }
    let t = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter from its stored
    /// gradient; `t` counts steps from 1.
    pub fn step<F: Real>(&self, params: &mut ParamStore<F>, lr: f64, t: u64) -> Result<()> {
        if t == 0 {
            return Err(Error::invalid("adam step counter starts at 1"));
        }
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powf(t as f64));
        let c2 = F::of(1.0 - self.beta2.powf(t as f64));
        let (lr, eps) = (F::of(lr), F::of(self.eps));
        for p in params.iter_mut() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{}: grad {:?} vs value {:?}", p.name, p.grad.shape(), p.value.shape()),
                ));
            }
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(p.m.data_mut()).zip(p.v.data_mut()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `adam.step` with the standard coefficients.
pub fn adam_step<F: Real>(params: &mut ParamStore<F>, lr: f64, t: u64) -> Result<()> {
    Adam::default().step(params, lr, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 5.12e-5), 1e-3);
        assert_eq!(cosine_lr(10, 10, 1e-3, 5.12e-5), 5.12e-5);
        let mid = cosine_lr(5, 10, 1e-3, 5.12e-5);
        assert!((mid - (1e-3 + 5.12e-5) / 2.0).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=10).map(|s| cosine_lr(s, 10, 1e-3, 5.12e-5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("p", Tensor::from_f64([values.len()], values).unwrap());
        s.get_mut(0).grad = Tensor::from_f64([grads.len()], grads).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0, 3.0], &[0.0; 3]);
        adam_step(&mut s, 1e-3, 1).unwrap();
        assert_eq!(s.get(0).value.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut s = store(&[0.0, 0.0, 0.0], &[0.5, -3.0, 1e-3]);
        adam_step(&mut s, 1e-3, 1).unwrap();
        for (&x, g) in s.get(0).value.data().iter().zip([0.5f64, -3.0, 1e-3]) {
            assert!((x.abs() - 1e-3).abs() < 1e-7, "{x}");
            assert_eq!(x.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [3.0, -1.5, 0.25];
        let mut s = store(&[0.0; 3], &[0.0; 3]);
        let mut reached = None;
        for t in 1..=2000u64 {
            let g: Vec<f64> = s.get(0).value.data().iter().zip(target).map(|(x, c)| 2.0 * (x - c)).collect();
            s.get_mut(0).grad = Tensor::from_f64([3], &g).unwrap();
            adam_step(&mut s, cosine_lr(t as usize, 2000, 0.1, 1e-4), t).unwrap();
            let err = s.get(0).value.data().iter().zip(target).map(|(x, c)| (x - c).abs()).fold(0.0, f64::max);
            if err < 1e-4 && reached.is_none() {
                reached = Some(t);
            }
        }
        let err = s.get(0).value.data().iter().zip(target).map(|(x, c)| (x - c).abs()).fold(0.0, f64::max);
        assert!(reached.is_some() && err < 1e-4, "err {err}");
    }

    #[test]
    fn shape_mismatch_and_t_zero() {
        let mut s = store(&[0.0; 3], &[0.0; 3]);
        assert!(adam_step(&mut s, 1e-3, 0).is_err());
        s.get_mut(0).grad = Tensor::zeros(vec![2]);
        assert!(adam_step(&mut s, 1e-3, 1).is_err());
    }
}
