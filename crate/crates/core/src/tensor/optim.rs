//! AdamW with decoupled weight decay and global-norm gradient clipping.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T: Scalar = f32> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub config: AdamWConfig,
    /// Parameters excluded from weight decay (norm gains) are `false` here.
    pub decay_mask: Vec<bool>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(param_lens: &[usize], config: AdamWConfig) -> Self {
        Self {
            first_moment: param_lens.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![T::ZERO; n]).collect(),
            step_count: 0,
            config,
            decay_mask: vec![true; param_lens.len()],
        }
    }

    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.first_moment.len());
        self.decay_mask = mask;
        self
    }
}

/// One AdamW update. Fails without touching anything if shapes disagree or
/// any gradient is non-finite.
pub fn adamw_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamWState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            left: vec![params.len(), grads.len()],
            right: vec![state.first_moment.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: vec![p.len(), g.len()],
                right: vec![state.first_moment[i].len()],
            });
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} at element {j} is {:?}",
                g[j]
            )));
        }
    }

    let c = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let step_size = c.learning_rate / bias1;

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if state.decay_mask[i] {
            T::from_f64(1.0 - c.learning_rate * c.weight_decay)
        } else {
            T::ONE
        };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + ob1 * g[j];
            v[j] = b2 * v[j] + ob2 * g[j] * g[j];
            let denom = (v[j].to_f64() / bias2).sqrt() + c.epsilon;
            p[j] = p[j] * decay - T::from_f64(step_size * m[j].to_f64() / denom);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-12));
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}
