//! Adam with bias correction, plus global-norm gradient clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments sized to `len`, with the usual defaults
    /// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn new(len: usize) -> Self {
        Self::with_hyperparameters(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn for_param(param: &Tensor<T>) -> Self {
        Self::new(param.numel())
    }
}

/// One bias-corrected Adam update of `param` from its accumulated gradient.
/// Advances `state` and zeroes the gradient buffer afterwards.
pub fn adam_step<T: Real>(param: &mut Tensor<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !param.trainable() {
        return Err(Error::State("adam_step on a frozen tensor".into()));
    }
    let n = param.numel();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::dims("adam_step", param.shape(), &[state.m.len()]));
    }
    if param.grad().is_none() {
        return Err(Error::State(format!(
            "tensor of shape {:?} has no gradient buffer",
            param.shape()
        )));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - Float::powi(state.beta1, t));
    let c2 = T::from_f64(1.0 - Float::powi(state.beta2, t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(state.epsilon);

    let grad: Vec<T> = param.grad().map(<[T]>::to_vec).unwrap_or_default();
    let data = param.data_mut();
    for i in 0..n {
        let g = grad[i];
        let m = b1 * state.m[i] + (one - b1) * g;
        let v = b2 * state.v[i] + (one - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.zero_grad();
    Ok(())
}

/// Global L2 norm over every gradient buffer present.
pub fn grad_norm<T: Real>(params: &[&Tensor<T>]) -> f64 {
    let sq = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64();
            x * x
        })
        .sum::<f64>();
    Float::sqrt(sq)
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&Tensor<T>> = params.iter().map(|p| &**p).collect();
        grad_norm(&views)
    };
    if norm > max_norm && norm.is_finite() {
        let factor = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for x in g.iter_mut() {
                    *x *= factor;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(values: &[f32], grad: &[f32]) -> Tensor<f32> {
        let mut p = Tensor::new(&[values.len()], values.to_vec()).unwrap().with_trainable(true);
        p.accumulate_grad(grad).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate_regardless_of_gradient_scale() {
        for g in [1e-3f32, 0.5, 40.0] {
            let mut p = param_with_grad(&[1.0, 1.0], &[g, -g]);
            let mut s = AdamState::for_param(&p);
            adam_step(&mut p, &mut s, 1e-3).unwrap();
            assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-6, "{g}: {:?}", p.data());
            assert!((p.data()[1] - (1.0 + 1e-3)).abs() < 1e-6);
            assert_eq!(s.step_count, 1);
            assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = param_with_grad(&[0.25, -3.0], &[0.0, 0.0]);
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, 1e-3).unwrap();
        assert_eq!(p.data(), &[0.25, -3.0]);
    }

    #[test]
    fn identical_triples_update_identically() {
        let run = || {
            let mut p = param_with_grad(&[0.1, 0.2, 0.3], &[0.7, -0.01, 3.0]);
            let mut s = AdamState::for_param(&p);
            for _ in 0..5 {
                p.accumulate_grad(&[0.3, 0.2, -0.1]).unwrap();
                adam_step(&mut p, &mut s, 5e-5).unwrap();
            }
            (p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn step_count_increases_by_one() {
        let mut p = param_with_grad(&[0.0], &[1.0]);
        let mut s = AdamState::for_param(&p);
        for i in 1..=3 {
            p.accumulate_grad(&[1.0]).unwrap();
            adam_step(&mut p, &mut s, 1e-3).unwrap();
            assert_eq!(s.step_count, i);
        }
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut p = Tensor::<f32>::zeros(&[2]).with_trainable(true);
        let mut s = AdamState::for_param(&p);
        assert!(matches!(adam_step(&mut p, &mut s, 1e-3), Err(Error::State(_))));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn size_mismatch_is_dimension_error() {
        let mut p = param_with_grad(&[0.0, 0.0], &[1.0, 1.0]);
        let mut s = AdamState::<f32>::new(3);
        assert!(matches!(adam_step(&mut p, &mut s, 1e-3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = param_with_grad(&[0.0, 0.0], &[3.0, 0.0]);
        let mut b = param_with_grad(&[0.0], &[4.0]);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grad_norm(&[&a, &b]) - 1.0).abs() < 1e-6);
        let untouched = clip_grad_norm(&mut [&mut a, &mut b], 10.0);
        assert!((untouched - 1.0).abs() < 1e-6);
    }
}
