//! Adam / AdamW and the warmup-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled decay for AdamW; L2 penalty folded into the gradient for Adam.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        Self {
            algorithm: Algorithm::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }

    pub fn adam() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            weight_decay: 0.0,
            ..Self::adamw()
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update of every parameter at learning rate `lr`.
    ///
    /// All gradients are checked before anything is modified, so a
    /// non-finite gradient leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            p.check_same_shape(g)?;
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() {
            return Err(Error::Contract(
                "parameter list changed between optimizer steps".into(),
            ));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let wd = T::of(c.weight_decay);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = match c.algorithm {
                    Algorithm::Adam if c.weight_decay != 0.0 => gi + wd * *w,
                    _ => gi,
                };
                if c.algorithm == Algorithm::AdamW && c.weight_decay != 0.0 {
                    *w -= lr_t * wd * *w;
                }
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup {warmup_steps} exceeds total {total_steps} steps"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return Ok(self.base_lr);
            }
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // f(w) = w^2 at w = 1: gradient 2, bias-corrected update = lr * 2 / (2 + eps)
        let mut w = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam());
        let g = vec![Tensor::scalar(2.0)];
        opt.step(&mut [("w".into(), &mut w)], &g, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w.item() - expected).abs() < 1e-15);
        assert!((w.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_exact_noop_for_adam() {
        let mut w = Tensor::matrix(1, 3, vec![0.3, -1.2, 7.0]).unwrap();
        let before = w.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam());
        for _ in 0..5 {
            opt.step(&mut [("w".into(), &mut w)], &[Tensor::zeros(&[1, 3])], 0.1)
                .unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adamw_zero_gradient_applies_decoupled_decay() {
        let mut w = one_param(2.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            weight_decay: 0.1,
            ..OptimizerConfig::adamw()
        });
        opt.step(&mut [("w".into(), &mut w)], &[Tensor::scalar(0.0)], 0.5)
            .unwrap();
        assert!((w.item() - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut w = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam());
        let err = opt
            .step(&mut [("mech.hidden0.weight".into(), &mut w)], &[Tensor::scalar(f64::NAN)], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "mech.hidden0.weight"));
        assert_eq!(w.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = LrSchedule::new(1e-3, 10, 100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-3);
        assert!(s.lr_at(100).unwrap().abs() < 1e-18);
        let left = s.lr_at(10).unwrap();
        let right = s.lr_at(11).unwrap();
        assert!((left - right).abs() < 1e-3 * 0.01);
        assert!(s.lr_at(101).is_err());
        assert!(LrSchedule::new(1e-3, 11, 10).is_err());
    }

    #[test]
    fn schedule_midpoint_of_cosine() {
        let s = LrSchedule::new(2.0, 0, 10).unwrap();
        assert!((s.lr_at(5).unwrap() - 1.0).abs() < 1e-12);
    }
}
