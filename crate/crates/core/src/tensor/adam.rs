//! Adam with L2-coupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
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

/// Per-parameter moment estimates. Entries added to the store after
/// construction (adapters, new branches) get fresh zero moments lazily.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update of every trainable entry, using the
    /// gradients currently stored in `params`. Weight decay is added to the
    /// gradient before the moment updates.
    pub fn step(&mut self, params: &mut ParamStore) {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, e) in params.iter_mut() {
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, Vec::new());
                self.v.resize(i + 1, Vec::new());
            }
            if !e.trainable {
                continue;
            }
            if self.m[i].len() != e.value.len() {
                self.m[i] = vec![0.0; e.value.len()];
                self.v[i] = vec![0.0; e.value.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..e.value.len() {
                let g = e.grad[k] + c.weight_decay * e.value[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                e.value[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Cosine decay from `start` at epoch 0 to `floor` at the last epoch.
pub fn cosine_lr(start: f64, floor: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = epoch.min(total - 1) as f64 / (total - 1) as f64;
    floor + 0.5 * (start - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParamStore::new();
        p.insert("w", vec![3], vec![1.0, -2.0, 0.5], true).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        let id = p.insert("w", vec![1], vec![0.0], true).unwrap();
        p.get_mut(id).grad[0] = 1.0;
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p);
        assert!((p.get(id).value[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut p = ParamStore::new();
        let id = p.insert("w", vec![1], vec![2.0], false).unwrap();
        p.get_mut(id).grad[0] = 5.0;
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut p);
        assert_eq!(p.get(id).value[0], 2.0);
    }

    #[test]
    fn quadratic_descends() {
        let mut p = ParamStore::new();
        let id = p.insert("w", vec![1], vec![1.0], true).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        let mut losses = Vec::new();
        for _ in 0..100 {
            let th = p.get(id).value[0];
            losses.push(th * th);
            p.get_mut(id).grad[0] = 2.0 * th;
            opt.step(&mut p);
        }
        let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let avgs: Vec<f64> = losses.chunks(25).map(window).collect();
        assert!(losses[99] < losses[0]);
        assert!(avgs.windows(2).all(|w| w[1] < w[0]), "{avgs:?}");
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-5, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 9, 10) - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(1.0, 0.0, 5, 11);
        assert!((mid - 0.5).abs() < 1e-12);
    }
}
