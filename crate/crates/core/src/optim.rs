//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_LR: f32 = 0.00125;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// First and second moments, one buffer per parameter tensor, in store order.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>, lr: f32) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros() }
    }

    fn check(&self, params: &ParamStore<f32>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((id, name, t), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.len() != t.len() || v.len() != t.len() {
                return Err(Error::Dimension(format!(
                    "moment buffers for `{name}` hold {} values, parameter {:?} holds {}",
                    m.len(),
                    t.shape(),
                    t.len()
                )));
            }
            if t.grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` (#{}) has no gradient buffer",
                    id.index()
                )));
            }
        }
        Ok(())
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore<f32>) -> Result<()> {
        self.check(params)?;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let step_size = (self.lr as f64 / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (values, grad) = params.get_mut(id).values_and_grad_mut();
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..values.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                values[j] -= step_size * m[j] / denom;
                grad[j] = 0.0;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState) -> Result<()> {
    state.step(params)
}

/// Scales every gradient so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore<f32>, max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if let Some(g) = params.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32) -> (ParamStore<f32>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_noop() {
        let (mut s, id) = single(0.7);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        adam.step(&mut s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).values(), &[0.7]);
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [0.3f32, -2.0, 1e-3] {
            let (mut s, id) = single(1.0);
            let mut adam = AdamState::new(&s, DEFAULT_LR);
            s.get_mut(id).grad_mut().unwrap()[0] = g;
            adam.step(&mut s).unwrap();
            // first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
            let expected = 1.0 - DEFAULT_LR * g / (g.abs() + 1e-8);
            assert!((s.get(id).values()[0] - expected).abs() < 1e-6);
            assert_eq!(s.get(id).grad().unwrap(), &[0.0]);
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let (mut s, id) = single(0.0);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        let mut prev = 0.0;
        for _ in 0..2 {
            s.get_mut(id).grad_mut().unwrap()[0] = 0.5;
            adam.step(&mut s).unwrap();
            let now = s.get(id).values()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn mismatched_moments_rejected() {
        let (mut s, _) = single(0.0);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        adam.m[0].push(0.0);
        let err = adam.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        s.get_mut(id).grad_mut().unwrap().copy_from_slice(&[30.0, 40.0]);
        let n = clip_grad_norm(&mut s, 10.0);
        assert_eq!(n, 50.0);
        let g = s.get(id).grad().unwrap();
        assert!((g[0] - 6.0).abs() < 1e-5 && (g[1] - 8.0).abs() < 1e-5);
    }
}
