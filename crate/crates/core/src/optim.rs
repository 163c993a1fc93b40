//! Adam-family optimizer and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Param, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-parameter state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter that received a gradient on `tape`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        tape: &Tape,
        lr: f64,
    ) -> Result<()> {
        ensure!(
            lr.is_finite() && lr >= 0.0,
            Numeric,
            "learning rate {lr} is invalid"
        );
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for p in params {
            if !p.trainable {
                continue;
            }
            let Some(g) = tape.param_grad(&p.name) else {
                continue;
            };
            let n = p.value.len();
            ensure!(
                g.len() == n,
                Internal,
                "gradient of {} has {} values, expected {n}",
                p.name,
                g.len()
            );
            let (m, v) = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = p.value.data_mut();
            for i in 0..n {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                if c.weight_decay != 0.0 {
                    w[i] -= lr * c.weight_decay * w[i];
                }
                w[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then constant.
pub fn warmup_constant(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Cosine decay from `base` at step 0 to `floor` at step `total - 1`.
pub fn cosine(base: f64, floor: f64, total: usize, step: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let x = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * x).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = Param::new("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&p);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step([&mut p], &tape, 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.value.data()[1] + 1.1).abs() < 1e-7);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut p = Param::new("w", Tensor::full(&[3], 2.0));
        p.trainable = false;
        let mut tape = Tape::new();
        let w = tape.param(&p);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        opt.step([&mut p], &tape, 0.1).unwrap();
        assert_eq!(p.value.data(), &[2.0; 3]);
    }

    #[test]
    fn schedules() {
        assert_eq!(warmup_constant(1.0, 4, 0), 0.25);
        assert_eq!(warmup_constant(1.0, 4, 3), 1.0);
        assert_eq!(warmup_constant(1.0, 4, 100), 1.0);
        assert_eq!(cosine(1.0, 0.1, 11, 0), 1.0);
        assert!((cosine(1.0, 0.1, 11, 10) - 0.1).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..11 {
            let lr = cosine(1.0, 0.0, 11, s);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
