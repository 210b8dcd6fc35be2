//! Adam optimizer with bias correction.
//!
//! State is keyed by parameter path so it survives surgery that reorders
//! the registry. Frozen parameters are never touched.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use libm::{powf, sqrtf};

use crate::error::{CoreError, Result};
use crate::params::ParamSet;

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with the standard (0.9, 0.999, 1e-8) defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Step counter; increments by exactly 1 per `step`.
    pub t: u64,
    state: BTreeMap<String, AdamState>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One Adam update over every trainable parameter that has a gradient.
    /// Parameters without a gradient this step keep their value but the
    /// global step counter still advances once per call.
    pub fn step(&mut self, params: &mut ParamSet, lr: f32) -> Result<()> {
        if lr <= 0.0 {
            return Err(CoreError::Contract("adam: lr must be positive".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - powf(self.beta1, self.t as f32);
        let bc2 = 1.0 - powf(self.beta2, self.t as f32);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            if grad.shape() != p.tensor.shape() {
                return Err(CoreError::Contract(alloc::format!(
                    "adam: grad shape {:?} mismatches `{}` shape {:?}",
                    grad.shape(),
                    p.path,
                    p.tensor.shape()
                )));
            }
            let n = p.tensor.numel();
            let st = self.state.entry(p.path.clone()).or_insert_with(|| AdamState {
                m: alloc::vec![0.0; n],
                v: alloc::vec![0.0; n],
            });
            if st.m.len() != n {
                return Err(CoreError::Contract(alloc::format!(
                    "adam: stale state for `{}`",
                    p.path
                )));
            }
            let gd = grad.data();
            let w = p.tensor.data_mut();
            for i in 0..n {
                let g = gd[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] -= lr * m_hat / (sqrtf(v_hat) + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn first_step_hand_computed() {
        // w = 1.0, g = 0.5, lr = 0.01:
        // m_hat = 0.5, v_hat = 0.25, update = 0.01 * 0.5 / (0.5 + eps) ~ 0.01
        let mut ps = ParamSet::new();
        let id = ps.register("w", Tensor::scalar(1.0)).unwrap();
        ps.accumulate_grad(id, &Tensor::scalar(0.5)).unwrap();
        let mut opt = Adam::new();
        opt.step(&mut ps, 0.01).unwrap();
        let w = ps.get(id).tensor.item();
        assert!((w - 0.99).abs() < 1e-6, "w = {w}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        ps.accumulate_grad(id, &Tensor::zeros(&[3])).unwrap();
        let before = ps.get(id).tensor.clone();
        let mut opt = Adam::new();
        opt.step(&mut ps, 0.1).unwrap();
        assert_eq!(ps.get(id).tensor, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn frozen_parameter_untouched_over_many_steps() {
        let mut ps = ParamSet::new();
        let frozen = ps.register("frozen", Tensor::new(&[2], vec![0.25, -1.5]).unwrap()).unwrap();
        let live = ps.register("live", Tensor::scalar(1.0)).unwrap();
        ps.set_trainable("frozen", false).unwrap();
        let bits: Vec<u32> = ps.get(frozen).tensor.data().iter().map(|v| v.to_bits()).collect();
        let mut opt = Adam::new();
        for _ in 0..100 {
            ps.zero_grads();
            ps.accumulate_grad(frozen, &Tensor::new(&[2], vec![9.0, 9.0]).unwrap()).unwrap();
            ps.accumulate_grad(live, &Tensor::scalar(0.3)).unwrap();
            opt.step(&mut ps, 0.05).unwrap();
        }
        let after: Vec<u32> = ps.get(frozen).tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, after, "frozen parameter changed bitwise");
        assert!(ps.get(live).tensor.item() < 1.0);
        assert_eq!(opt.t, 100);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.accumulate_grad(id, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::scalar(0.0)).unwrap();
        let mut opt = Adam::new();
        assert!(opt.step(&mut ps, 0.0).is_err());
    }
}
