//! Nesterov momentum with coupled L2 and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup: 100,
        }
    }
}

/// Linear warmup to `lr_max` over `w` steps, then half-cosine decay to zero
/// at `total`.
pub fn cosine_lr(t: u64, lr_max: f64, w: u64, total: u64) -> Result<f64> {
    if t > total {
        return Err(Error::invalid("cosine_lr", format!("step {t} is past the schedule end {total}")));
    }
    if t < w {
        return Ok(lr_max * t as f64 / w as f64);
    }
    if total == w {
        return Ok(0.0);
    }
    let progress = (t - w) as f64 / (total - w) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// One buffer per store entry; empty for buffers that are not trained.
    pub velocity: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let velocity = store
            .iter()
            .map(|(_, p)| {
                if p.kind.trainable() {
                    vec![0.0; p.tensor.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { velocity, step: 0 }
    }
}

/// `g = grad + λθ; vel = μ·vel + g; θ -= lr·(g + μ·vel)`, with λ applied
/// only to weights and embeddings. Trainable tensors without a gradient
/// are treated as having a zero data gradient.
pub fn nesterov_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f32,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::invalid(
            "nesterov_step",
            format!(
                "{} gradients and {} velocities for {} parameters",
                grads.len(),
                state.velocity.len(),
                store.len()
            ),
        ));
    }
    let mu = cfg.momentum;
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if !p.kind.trainable() {
            continue;
        }
        let lambda = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        let n = p.tensor.len();
        let grad = grads[id.index()].as_deref();
        let vel = &mut state.velocity[id.index()];
        if grad.is_some_and(|g| g.len() != n) || vel.len() != n {
            return Err(Error::Param {
                name: p.name.clone(),
                msg: format!("gradient or velocity length does not match {n} values"),
            });
        }
        for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[i]) + lambda * *theta;
            vel[i] = mu * vel[i] + g;
            *theta -= lr * (g + mu * vel[i]);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;
    use crate::tensor::Tensor;

    fn one(value: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w.weight", Role::Head, Tensor::full(vec![1], value)).unwrap();
        s
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 0.1, 100, 1000).unwrap(), 0.0);
        assert_eq!(cosine_lr(100, 0.1, 100, 1000).unwrap(), 0.1);
        assert!(cosine_lr(1000, 0.1, 100, 1000).unwrap().abs() < 1e-9);
        assert!(cosine_lr(1001, 0.1, 100, 1000).is_err());
    }

    #[test]
    fn single_hand_step() {
        let mut s = one(1.0);
        let mut st = OptimizerState::new(&s);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        nesterov_step(&mut s, &[Some(vec![1.0])], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(st.velocity[0], vec![1.0]);
        assert!((s.tensor(s.id("w.weight").unwrap()).data()[0] - 0.81).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_cases() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = one(0.5);
        let mut st = OptimizerState::new(&s);
        nesterov_step(&mut s, &[Some(vec![0.0])], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(s, one(0.5));

        let cfg = OptimizerConfig::default();
        nesterov_step(&mut s, &[None], &mut st, &cfg, 0.1).unwrap();
        assert!(s.tensor(s.id("w.weight").unwrap()).data()[0] < 0.5);
        assert!(nesterov_step(&mut s, &[Some(vec![0.0, 1.0])], &mut st, &cfg, 0.1).is_err());
    }
}
