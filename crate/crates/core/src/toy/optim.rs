//! AdamW with decoupled weight decay and a single step-drop schedule.

use crate::tensor::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients stored on each parameter. Frozen
    /// parameters and parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * self.weight_decay * *w;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of all gradients of trainable parameters.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .filter_map(|id| store.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let n = grad_norm(store);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    n
}

/// Step-drop learning rate: `base` until `drop_at`, then `base · factor`.
pub fn scheduled_lr(base: f64, step: usize, drop_at: usize, factor: f64) -> f64 {
    if step >= drop_at {
        base * factor
    } else {
        base
    }
}
