//! Adam with bias correction, linear learning-rate warmup, and global-norm
//! gradient clipping.

use super::{ParamStore, TensorError};

/// Optimizer hyper-parameters. `warmup` is the number of steps over which
/// the learning rate climbs linearly from zero; 0 disables warmup.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 100,
        }
    }
}

impl AdamConfig {
    /// Learning rate at a 1-based step: `lr * min(1, step / warmup)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// First and second moment estimates, aligned with a store's parameter
/// order.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { m, v }
    }
}

/// One Adam update over every parameter in the store. `step` is 1-based and
/// drives both bias correction and warmup. Parameters without a gradient
/// buffer are treated as having zero gradient. Any non-finite gradient
/// aborts the step before any parameter is touched, naming the offender.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: usize,
) -> Result<(), TensorError> {
    assert!(step >= 1, "adam steps are 1-based");
    for (name, t) in store.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
        }
    }
    let lr = cfg.lr_at(step);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (i, (_, t)) in store.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for c in 0..t.numel() {
            let g = t.grad().map_or(0.0, |g| g[c]);
            m[c] = cfg.beta1 * m[c] + (1.0 - cfg.beta1) * g;
            v[c] = cfg.beta2 * v[c] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[c] / bc1;
            let v_hat = v[c] / bc2;
            t.data_mut()[c] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales every gradient in the store so the global L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in store.iter() {
        if let Some(g) = t.grad() {
            for &v in g {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if t.grad().is_some() {
                for v in t.grad_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::{adam_step, clip_global_norm, AdamConfig, AdamState};
    use crate::tensor::{ParamStore, Tape, Tensor, TensorError};

    /// Minimizing f(w) = w^2 from w = 1 with lr 0.1 converges fast.
    #[test]
    fn quadratic_converges() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig {
            lr: 0.1,
            warmup: 0,
            ..AdamConfig::default()
        };
        for step in 1..=200 {
            store.zero_grads();
            let mut tape = Tape::new();
            store.bind_mut(&mut tape);
            let id = store.get(w).node_id().unwrap();
            let sq = tape.mul(id, id).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            store.accumulate_grads(&tape);
            adam_step(&mut store, &mut state, &cfg, step).unwrap();
        }
        assert!(store.get(w).data()[0].abs() < 1e-2);
    }

    #[test]
    fn warmup_scales_learning_rate_linearly() {
        let cfg = AdamConfig {
            lr: 0.5,
            warmup: 10,
            ..AdamConfig::default()
        };
        assert!((cfg.lr_at(1) - 0.05).abs() < 1e-12);
        assert!((cfg.lr_at(5) - 0.25).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(10_000) - 0.5).abs() < 1e-12);

        // First-step displacement is (lr/10) * m_hat / (sqrt(v_hat) + eps),
        // and with a single constant gradient m_hat/sqrt(v_hat) = sign(g).
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        store.get_mut(w).grad_mut()[0] = 2.0;
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &cfg, 1).unwrap();
        let moved = 1.0 - store.get(w).data()[0];
        assert!((moved - 0.05).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        store.get_mut(a).grad_mut().copy_from_slice(&[3.0, 4.0]);
        let pre = clip_global_norm(&mut store, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let g = store.get(a).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        // Norms at or below the cap are untouched.
        let pre2 = clip_global_norm(&mut store, 1.0);
        assert!((pre2 - 1.0).abs() < 1e-12);
        let g = store.get(a).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("fine", Tensor::new(vec![1], vec![0.0]).unwrap());
        let bad = store.add("exploded", Tensor::new(vec![1], vec![0.0]).unwrap());
        store.get_mut(bad).grad_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&store);
        let err = adam_step(&mut store, &mut state, &AdamConfig::default(), 1).unwrap_err();
        match err {
            TensorError::NonFiniteGradient { param } => assert_eq!(param, "exploded"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn gradient_free_parameters_stay_put() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2], vec![1.5, -2.5]).unwrap());
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default(), 1).unwrap();
        assert_eq!(store.get(w).data(), &[1.5, -2.5]);
    }
}
