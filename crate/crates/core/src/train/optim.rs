use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Peak learning rate; `None` means `5e-4 · batch_size / 256`.
    pub base_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Focal-bias decay rate; `None` means `weight_decay`.
    pub bias_decay: Option<f64>,
    pub warmup_epochs: f64,
    pub epochs: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad: f64,
    pub label_smoothing: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: None,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.3,
            bias_decay: None,
            warmup_epochs: 20.0,
            epochs: 100.0,
            clip_grad: 0.0,
            label_smoothing: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("bias_decay", self.bias_decay()),
            ("warmup_epochs", self.warmup_epochs),
            ("clip_grad", self.clip_grad),
            ("eps", self.eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a nonnegative number, got {v}"));
            }
        }
        if let Some(lr) = self.base_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("lr must be a nonnegative number, got {lr}"));
            }
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return bad(format!("epochs must be positive, got {}", self.epochs));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must be in [0, 1), got {b}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        Ok(())
    }

    pub fn peak_lr(&self, batch_size: usize) -> f64 {
        self.base_lr.unwrap_or(5e-4 * batch_size as f64 / 256.0)
    }

    pub fn bias_decay(&self) -> f64 {
        self.bias_decay.unwrap_or(self.weight_decay)
    }
}

/// Linear warmup to the peak followed by a half cosine down to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    /// A flat schedule, for tests and decay-only experiments.
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == u64::MAX && self.warmup_steps == 0 {
            return self.peak;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (PI * t).cos())
    }
}

/// Per-kind decay rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayRates {
    pub weight: f64,
    /// `None` when focal-bias decay is switched off.
    pub focal_bias: Option<f64>,
}

impl DecayRates {
    pub fn for_kind(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Weight => self.weight,
            ParamKind::NoDecay => 0.0,
            ParamKind::FocalBias => self.focal_bias.unwrap_or(0.0),
        }
    }
}

/// AdamW with decoupled decay. Moments are kept in the parameters' float
/// type; every update evaluates in `f64` and rounds once.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: DecayRates,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments in parameter order; empty for fixed
    /// parameters.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &OptimizerConfig, decay_enabled: bool) -> Self {
        let zeros = |p: &crate::model::Param<T>| {
            if p.trainable {
                Tensor::zeros(p.tensor.shape().to_vec())
            } else {
                Tensor::scalar(T::zero())
            }
        };
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            decay: DecayRates {
                weight: cfg.weight_decay,
                focal_bias: decay_enabled.then(|| cfg.bias_decay()),
            },
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// `θ ← (1 − lr·λ)·θ`, then `θ ← θ − lr·m̂/(√v̂ + eps)`, for every
    /// trainable parameter. `grads` follows parameter order; `None` entries
    /// (fixed parameters) are skipped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = g else {
                continue;
            };
            if g.len() != p.tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient of length {} for `{}` {:?}",
                    g.len(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            let keep = 1.0 - lr * self.decay.for_kind(p.kind);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].widen();
                let mi = b1 * m[i].widen() + (1.0 - b1) * gi;
                let vi = b2 * v[i].widen() + (1.0 - b2) * gi * gi;
                m[i] = T::cast(mi);
                v[i] = T::cast(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *theta = T::cast(keep * theta.widen() - lr * update);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.widen() * v.widen())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = T::cast(v.widen() * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-3, 10, 100);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5), 5e-4);
        assert_eq!(s.lr_at(10), 1e-3);
        assert_eq!(s.lr_at(100), 0.0);
        assert!((s.lr_at(55) - 5e-4).abs() < 1e-15);
        // continuous at the junction
        assert!((s.lr_at(9) - s.lr_at(10)).abs() <= 1e-4 + 1e-12);
        assert!((0..=120).all(|t| s.lr_at(t) >= 0.0));
    }

    #[test]
    fn auto_lr_scales_with_batch() {
        let c = OptimizerConfig::default();
        assert_eq!(c.peak_lr(256), 5e-4);
        assert_eq!(c.peak_lr(64), 1.25e-4);
        assert_eq!(c.bias_decay(), 0.3);
    }

    #[test]
    fn warmup_longer_than_training_is_rejected() {
        let c = OptimizerConfig {
            warmup_epochs: 30.0,
            epochs: 20.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }
}
