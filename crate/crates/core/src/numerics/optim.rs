use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Parameters are passed as a list of flat tensors ("slots"); the moment
/// buffers are created on the first step and must keep their shapes after
/// that, except through [`AdamW::retain`].
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(lr, params, grads)
    }

    /// One update at an externally scheduled learning rate.
    pub fn step_with_lr(
        &mut self,
        lr: f64,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "tensor {i}: {} parameters, {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape("parameter shapes changed between steps"));
        }

        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for j in 0..p.len() {
                p[j] -= lr * weight_decay * p[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Drops moment entries of `slot` where `keep` is false, mirroring a
    /// parameter tensor that was pruned the same way.
    pub fn retain(&mut self, slot: usize, keep: &[bool]) {
        if self.first.is_empty() {
            return;
        }
        for buf in [&mut self.first[slot], &mut self.second[slot]] {
            debug_assert_eq!(buf.len(), keep.len());
            let mut it = keep.iter();
            buf.retain(|_| *it.next().unwrap_or(&true));
        }
    }
}

/// Cosine annealing from `base_lr` to `min_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            min_lr,
            total_steps,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step == 0 {
            return self.base_lr;
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let t = step as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![1.5, -2.0];
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn single_step_matches_hand_derivation() {
        // step 1, g = 1: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 5e-4,
            ..Default::default()
        });
        let mut p = vec![2.0];
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let decayed = 2.0 - 1e-3 * 5e-4 * 2.0;
        let expect = decayed - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut a = vec![0.3, 0.3];
        for _ in 0..5 {
            opt.step(&mut [&mut a], &[&[0.7, 0.7]]).unwrap();
        }
        assert_eq!(a[0].to_bits(), a[1].to_bits());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0, 2.0, 3.0];
        opt.step_with_lr(0.0, &mut [&mut p], &[&[1.0, -1.0, 4.0]]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0, 2.0];
        assert!(opt.step(&mut [&mut p], &[&[1.0]]).is_err());
        opt.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
        let mut q = vec![1.0];
        assert!(opt.step(&mut [&mut q], &[&[1.0]]).is_err());
    }

    #[test]
    fn retain_compacts_moments() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0, 2.0, 3.0];
        opt.step(&mut [&mut p], &[&[1.0, 1.0, 1.0]]).unwrap();
        opt.retain(0, &[true, false, true]);
        let mut q = vec![p[0], p[2]];
        opt.step(&mut [&mut q], &[&[1.0, 1.0]]).unwrap();
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = CosineSchedule::new(1e-3, 1e-5, 100);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(100), 1e-5);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = s.lr(t);
            assert!(lr <= prev);
            let expect = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + (PI * t as f64 / 100.0).cos());
            assert!((lr - expect).abs() < 1e-18);
            prev = lr;
        }
    }
}
