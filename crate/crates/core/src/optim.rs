//! Adam and the one-cycle learning-rate policy.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// Initial learning rate is `lr_max / INITIAL_DIV`.
pub const INITIAL_DIV: f64 = 25.0;
/// Final learning rate is `lr_max / FINAL_DIV`.
pub const FINAL_DIV: f64 = 1e4;

/// Linear warmup from `lr_max/25` to `lr_max` over the first 30% of steps,
/// then cosine decay to `lr_max/10⁴`.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Input(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let start = lr_max / INITIAL_DIV;
    let end = lr_max / FINAL_DIV;
    let peak = WARMUP_FRACTION * total_steps as f64;
    let s = step as f64;
    Ok(if s <= peak {
        if peak == 0.0 {
            lr_max
        } else {
            start + (lr_max - start) * s / peak
        }
    } else {
        let frac = (s - peak) / (total_steps as f64 - peak);
        end + (lr_max - end) * 0.5 * (1.0 + (PI * frac).cos())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: BTreeMap<ParamId, (u64, Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one update to each listed parameter that is still trainable.
    /// Bias correction is tracked per parameter, so a parameter that starts
    /// training late is not penalized.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let value = store.value_mut(*id);
            if value.shape() != g.shape() {
                return Err(Error::dim("adam_step", value.shape(), g.shape()));
            }
            let (t, m, v) = self
                .steps
                .entry(*id)
                .or_insert_with(|| (0, vec![0.0; g.len()], vec![0.0; g.len()]));
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            for (i, (w, &gi)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
