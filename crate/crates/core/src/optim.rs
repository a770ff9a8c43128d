//! Adam / AdamW and the two learning-rate schedules used for pretraining and
//! head training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `true` applies weight decay directly to the weights (AdamW); `false`
    /// folds it into the gradient as an L2 term (classic Adam).
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            decoupled: true,
            ..Self::adam()
        }
    }
}

/// Gradients pulled off a model's leaves, in visit order.
#[derive(Debug, Clone)]
pub struct Gradients<E: Element> {
    entries: Vec<(String, Vec<E>)>,
}

impl<E: Element> Gradients<E> {
    /// Takes (and clears) the gradient of every trainable parameter.
    /// A trainable parameter without a gradient is a contract violation.
    pub fn collect<M: Module<E> + ?Sized>(model: &M) -> Result<Self> {
        let mut entries = Vec::new();
        let mut missing = None;
        model.visit(&mut |p| {
            if !p.is_trainable() || missing.is_some() {
                return;
            }
            match p.take_grad() {
                Some(g) => entries.push((p.name().to_string(), g)),
                None => missing = Some(p.name().to_string()),
            }
        });
        if let Some(name) = missing {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        Ok(Self { entries })
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = E::from_f64(max_norm / norm);
            for (_, g) in &mut self.entries {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub fn get(&self, name: &str) -> Option<&[E]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }
}

struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Adam optimizer state: first/second moments per parameter name plus the
/// shared step counter.
pub struct Adam<E: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Collects gradients from `model` and applies one update at `lr`.
    pub fn step<M: Module<E> + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let grads = Gradients::collect(model)?;
        self.apply(model, &grads, lr)
    }

    pub fn apply<M: Module<E> + ?Sized>(&mut self, model: &mut M, grads: &Gradients<E>, lr: f64) -> Result<()> {
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (E::from_f64(cfg.beta1), E::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (E::from_f64(1.0 - cfg.beta1), E::from_f64(1.0 - cfg.beta2));
        let (inv_bc1, inv_bc2) = (E::from_f64(1.0 / bc1), E::from_f64(1.0 / bc2));
        let (lr_e, eps, wd) = (E::from_f64(lr), E::from_f64(cfg.eps), E::from_f64(cfg.weight_decay));
        let decay = E::from_f64(1.0 - lr * cfg.weight_decay);
        let moments = &mut self.moments;
        let mut failure = None;
        model.visit_mut(&mut |p| {
            if failure.is_some() || !p.is_trainable() {
                return;
            }
            let Some(g) = grads.get(p.name()) else {
                failure = Some(Error::Contract(format!("parameter {} has no gradient", p.name())));
                return;
            };
            let n = g.len();
            let state = moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: vec![E::zero(); n],
                v: vec![E::zero(); n],
            });
            if state.m.len() != n {
                failure = Some(Error::Contract(format!("moment buffer shape changed for {}", p.name())));
                return;
            }
            let w = p.data_mut();
            for i in 0..n {
                let mut gi = g[i];
                if cfg.weight_decay != 0.0 {
                    if cfg.decoupled {
                        w[i] *= decay;
                    } else {
                        gi += wd * w[i];
                    }
                }
                state.m[i] = b1 * state.m[i] + one_b1 * gi;
                state.v[i] = b2 * state.v[i] + one_b2 * gi * gi;
                let m_hat = state.m[i] * inv_bc1;
                let v_hat = state.v[i] * inv_bc2;
                w[i] -= lr_e * m_hat / (v_hat.sqrt() + eps);
            }
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                failure = Some(Error::Numeric {
                    layer: p.name().to_string(),
                    detail: format!("non-finite weight at index {i} after optimizer step"),
                });
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Linear ramp from 0 to `target_lr` over `warmup_steps`, then constant.
/// `warmup_steps == 0` means constant `target_lr` from the first step.
pub fn lr_warmup_then_constant(step: u64, warmup_steps: u64, target_lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        target_lr
    } else {
        target_lr * step as f64 / warmup_steps as f64
    }
}

/// `initial_lr · (1 − epoch / total_epochs)`, clamped to 0 past the end.
pub fn lr_linear_decay(epoch: u64, total_epochs: u64, initial_lr: f64) -> f64 {
    if total_epochs == 0 || epoch >= total_epochs {
        return 0.0;
    }
    initial_lr * (1.0 - epoch as f64 / total_epochs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::tensor::Tensor;

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    fn with_grad(values: &[f64], grad: &[f64]) -> One {
        let m = One(Param::new("w", Tensor::from_f64(vec![values.len()], values).unwrap()));
        let g = Tensor::from_f64(vec![grad.len()], grad).unwrap();
        m.0.value().mul(&g).unwrap().sum().backward().unwrap();
        m
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut m = with_grad(&[0.5, -1.0, 2.0], &[0.0, 0.0, 0.0]);
        Adam::new(AdamConfig::adam()).step(&mut m, 1e-2).unwrap();
        assert_eq!(m.0.value().to_f64_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after bias correction, so Δ = −lr / (1 + eps)
        let mut m = with_grad(&[1.0], &[1.0]);
        let mut opt = Adam::new(AdamConfig {
            eps: 1e-12,
            ..AdamConfig::adam()
        });
        opt.step(&mut m, 1e-3).unwrap();
        assert!((m.0.value().item() - (1.0 - 1e-3)).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn adamw_decay_is_multiplicative() {
        let mut m = with_grad(&[2.0, -4.0], &[0.0, 0.0]);
        Adam::new(AdamConfig::adamw(0.1)).step(&mut m, 0.5).unwrap();
        // w ← w·(1 − lr·wd) = w·0.95
        assert_eq!(m.0.value().to_f64_vec(), vec![1.9, -3.8]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut m = One(Param::new("head.w", Tensor::<f64>::ones(vec![1])));
        let err = Adam::new(AdamConfig::adam()).step(&mut m, 1e-3).unwrap_err();
        assert!(err.to_string().contains("head.w"));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let m = with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        let mut g = Gradients::collect(&m).unwrap();
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_schedule_points() {
        assert_eq!(lr_warmup_then_constant(0, 100, 1e-4), 0.0);
        assert_eq!(lr_warmup_then_constant(50, 100, 1e-4), 5e-5);
        assert_eq!(lr_warmup_then_constant(100, 100, 1e-4), 1e-4);
        assert_eq!(lr_warmup_then_constant(5000, 100, 1e-4), 1e-4);
        assert_eq!(lr_warmup_then_constant(0, 0, 1e-4), 1e-4);
    }

    #[test]
    fn linear_decay_points() {
        assert_eq!(lr_linear_decay(0, 120, 1e-5), 1e-5);
        assert_eq!(lr_linear_decay(120, 120, 1e-5), 0.0);
        assert!((lr_linear_decay(30, 120, 1e-5) - 7.5e-6).abs() < 1e-20);
        assert_eq!(lr_linear_decay(500, 120, 1e-5), 0.0);
    }
}
