//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{config_err, contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return config_err(format!("invalid AdamW hyperparameters {self:?}"));
        }
        Ok(())
    }
}

/// Optimizer state. Moment buffers are keyed by the position of each
/// parameter in the slice passed to [`AdamW::step`], so callers must pass
/// parameters in a stable order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over `params`; consumes and clears their gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return contract_err(format!("parameter {i} has no gradient"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return contract_err("parameter list changed between optimizer steps");
        }
        self.t += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for i in 0..data.len() {
                data[i] -= lr * weight_decay * data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let total: f64 = params.iter().filter_map(|p| p.grad()).flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad().map(|g| g.iter().map(|x| x * s).collect::<Vec<_>>()) {
                p.zero_grad();
                p.accumulate_grad(&g).expect("same length");
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_requires_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    /// Textbook Adam recurrence for a single scalar, written out independently.
    fn reference_first_step(p: f64, g: f64, lr: f64) -> f64 {
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mh = m / (1.0 - 0.9);
        let vh = v / (1.0 - 0.999);
        p - lr * mh / (vh.sqrt() + 1e-8)
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = param(0.37, 0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.37]);
    }

    #[test]
    fn first_step_matches_reference() {
        let mut p = param(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let want = reference_first_step(1.0, 1.0, 0.1);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!(p.grad().is_none());
    }

    #[test]
    fn decay_only_update() {
        let mut p = param(1.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() }).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Tensor::scalar(1.0).with_requires_grad();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = param(0.0, 3.0);
        let mut q = param(0.0, 4.0);
        let n = clip_grad_norm(&mut [&mut p, &mut q], 1.0);
        assert_eq!(n, 5.0);
        assert!((p.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((q.grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
