//! SGD with momentum and AdamW over named parameter maps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Adapter fine-tuning defaults: no decay on the low-rank factors.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    AdamW(AdamWConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd(c) => c.lr > 0.0 && (0.0..1.0).contains(&c.momentum),
            OptimizerConfig::AdamW(c) => {
                c.lr > 0.0
                    && c.beta1 > 0.0
                    && c.beta1 < 1.0
                    && c.beta2 > 0.0
                    && c.beta2 < 1.0
                    && c.eps > 0.0
                    && c.weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid optimizer hyper-parameters {self:?}")))
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.lr,
            OptimizerConfig::AdamW(c) => c.lr,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Option<Tensor>,
}

/// Step counter and per-parameter buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    pub step: u64,
    pub buffers: BTreeMap<String, Moments>,
}

impl TrainState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = libm::sqrt(grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s)?;
        }
    }
    Ok(norm)
}

/// One update of every tensor in `params`. Each must have a gradient of the
/// same shape; tensors not in `params` are never touched.
pub fn step(
    state: &mut TrainState,
    config: &OptimizerConfig,
    params: &BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    config.validate()?;
    for (name, p) in params {
        let g = grads
            .get(name)
            .ok_or_else(|| invalid(format!("missing gradient for {name}")))?;
        if g.dims() != p.dims() {
            return Err(invalid(format!("gradient shape {:?} != parameter shape {:?} for {name}", g.dims(), p.dims())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let mut out = BTreeMap::new();
    for (name, p) in params {
        let g = &grads[name];
        let updated = match *config {
            OptimizerConfig::Sgd(c) => {
                let v = match state.buffers.get(name) {
                    Some(m) if c.momentum > 0.0 => m.first.scale(c.momentum)?.add(g)?,
                    _ => g.clone(),
                };
                let next = p.sub(&v.scale(c.lr)?)?;
                state.buffers.insert(name.clone(), Moments { first: v, second: None });
                next
            }
            OptimizerConfig::AdamW(c) => {
                let (m_prev, v_prev) = match state.buffers.get(name) {
                    Some(Moments { first, second: Some(second) }) => (first.clone(), second.clone()),
                    _ => (p.zeros_like(), p.zeros_like()),
                };
                let m = m_prev.zip_map(g, "adamw", |m, g| c.beta1 * m + (1.0 - c.beta1) * g)?;
                let v = v_prev.zip_map(g, "adamw", |v, g| c.beta2 * v + (1.0 - c.beta2) * g * g)?;
                let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
                let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
                let decayed = p.scale(1.0 - c.lr * c.weight_decay)?;
                let upd = m.zip_map(&v, "adamw", |m, v| c.lr * (m / bc1) / (libm::sqrt(v / bc2) + c.eps))?;
                let next = decayed.sub(&upd)?;
                state.buffers.insert(name.clone(), Moments { first: m, second: Some(v) });
                next
            }
        };
        out.insert(name.clone(), updated);
    }
    Ok(out)
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [batch, classes] = *logits.dims() else {
        return Err(invalid("logits must be batch x classes"));
    };
    if labels.len() != batch {
        return Err(invalid("label count differs from batch size"));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(&logits.data()[b * classes..(b + 1) * classes]) == y)
        .count();
    Ok(hits as f64 / batch as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use alloc::vec;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.into(), Tensor::from_vec(&[1], vec![v]).unwrap());
        m
    }

    #[test]
    fn sgd_example() {
        let cfg = OptimizerConfig::Sgd(SgdConfig { lr: 0.1, momentum: 0.0 });
        let out = step(&mut TrainState::new(), &cfg, &one("w", 1.0), &one("w", 2.0)).unwrap();
        assert!((out["w"].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let cfg = OptimizerConfig::Sgd(SgdConfig { lr: 0.1, momentum: 0.5 });
        let mut state = TrainState::new();
        let p1 = step(&mut state, &cfg, &one("w", 1.0), &one("w", 1.0)).unwrap();
        let p2 = step(&mut state, &cfg, &p1, &one("w", 1.0)).unwrap();
        // v1 = 1, v2 = 0.5 + 1 = 1.5
        assert!((p2["w"].data()[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_lr() {
        let cfg = OptimizerConfig::AdamW(AdamWConfig::default());
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let out = step(&mut TrainState::new(), &cfg, &one("w", 1.0), &one("w", c)).unwrap();
            let delta = (1.0 - out["w"].data()[0]).abs();
            assert!((delta - 1e-3).abs() < 1e-3 * 1e-4, "{c}: {delta}");
        }
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        // Reference Adam written independently of `step`.
        let (b1, b2, lr, eps) = (0.9, 0.999, 1e-2, 1e-8);
        let grads = [0.3, -1.2, 0.7, 0.05, -0.4];
        let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        let cfg = OptimizerConfig::AdamW(AdamWConfig { lr, beta1: b1, beta2: b2, eps, weight_decay: 0.0 });
        let mut state = TrainState::new();
        let mut params = one("w", 2.0);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - libm::pow(b1, (t + 1) as f64));
            let vh = v / (1.0 - libm::pow(b2, (t + 1) as f64));
            theta -= lr * mh / (libm::sqrt(vh) + eps);
            params = step(&mut state, &cfg, &params, &one("w", g)).unwrap();
            assert!((params["w"].data()[0] - theta).abs() < 1e-14);
        }
        assert_eq!(state.step, 5);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let cfg = OptimizerConfig::AdamW(AdamWConfig { weight_decay: 0.1, lr: 0.01, ..AdamWConfig::default() });
        let out = step(&mut TrainState::new(), &cfg, &one("w", 2.0), &one("w", 0.0)).unwrap();
        assert!((out["w"].data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let cfg = OptimizerConfig::AdamW(AdamWConfig::default());
        let mut state = TrainState::new();
        assert!(step(&mut state, &cfg, &one("w", 1.0), &one("v", 1.0)).is_err());
        assert_eq!(state.step, 0);
        assert!(OptimizerConfig::Sgd(SgdConfig { lr: -1.0, momentum: 0.0 }).validate().is_err());
    }

    #[test]
    fn clipping() {
        let mut g = one("a", 3.0);
        g.insert("b".into(), Tensor::from_vec(&[1], vec![4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_and_accuracy() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let l = tape.softmax_xent(z, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - core::f64::consts::LN_2).abs() < 1e-15);

        let z = tape.input(Tensor::from_vec(&[2, 3], vec![40.0, 0.0, 0.0, 0.0, 0.0, 40.0]).unwrap());
        let l = tape.softmax_xent(z, &[0, 2]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        let onehot = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&onehot, &[0, 2, 1]).unwrap(), 1.0);
        let tie = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&tie, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&tie, &[1]).unwrap(), 0.0);
    }
}
