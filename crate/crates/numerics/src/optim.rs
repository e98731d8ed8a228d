use serde::{Deserialize, Serialize};

use crate::{Array, NumericsError, Result, Scalar};

/// AdamW hyperparameters (learning rate comes from the schedule per step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    /// Plain Adam.
    pub fn adam() -> Self {
        Self { weight_decay: 0.0, ..Self::default() }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Array<T>>) -> Self {
        let m: Vec<Array<T>> = params.into_iter().map(|p| Array::zeros(p.shape())).collect();
        let v = m.clone();
        Self { config, m, v, t: 0 }
    }

    /// One decoupled-weight-decay update:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
    pub fn step(&mut self, params: &mut [&mut Array<T>], grads: &[&Array<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericsError::Shape(format!(
                    "param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr_t, wd, eps) = (T::of(lr), T::of(c.weight_decay), T::of(c.eps));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *w = *w - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.05, v = 2.5e-4; bias-corrected m_hat = 0.5, v_hat = 0.25.
        let oracle = {
            let (mhat, vhat) = (0.5f64, 0.25f64);
            1.0 - 0.1 * (mhat / (vhat.sqrt() + 1e-8) + 0.01 * 1.0)
        };
        let mut w = Array::<f64>::scalar(1.0);
        let g = Array::<f64>::scalar(0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        opt.step(&mut [&mut w], &[&g], 0.1).unwrap();
        assert_eq!(opt.t, 1);
        assert!((w.item() - oracle).abs() < 1e-15);
        assert!((w.item() - 0.899).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut w = Array::<f32>::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let before = w.clone();
        let g = Array::<f32>::zeros(&[3]);
        let mut opt = AdamW::new(AdamWConfig::adam(), [&w]);
        for _ in 0..5 {
            opt.step(&mut [&mut w], &[&g], 0.1).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(opt.t, 5);
    }

    #[test]
    fn identical_params_update_identically() {
        let mut a = Array::<f32>::from_f64(&[2], &[0.7, -0.2]).unwrap();
        let mut b = a.clone();
        let g = Array::<f32>::from_f64(&[2], &[0.1, 0.4]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), [&a, &b]);
        for _ in 0..3 {
            opt.step(&mut [&mut a, &mut b], &[&g, &g], 1e-2).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut w = Array::<f32>::zeros(&[2]);
        let g = Array::<f32>::zeros(&[3]);
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        assert!(opt.step(&mut [&mut w], &[&g], 0.1).is_err());
        assert_eq!(opt.t, 0);
    }
}
