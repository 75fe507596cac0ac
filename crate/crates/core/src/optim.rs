//! Adam without weight decay and a warm-up + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<E = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig, params: &ParamStore<E>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![E::zero(); t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr`. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &[Tensor<E>], lr: f64) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} grads for {} params", grads.len(), self.m.len()),
            ));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&x| x.to_f64() * x.to_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (E::from_f64(c.beta1), E::from_f64(c.beta2));
        let (one_b1, one_b2) = (E::from_f64(1.0 - c.beta1), E::from_f64(1.0 - c.beta2));
        let step_size = E::from_f64(lr / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let eps = E::from_f64(c.eps);
        let clip = E::from_f64(clip);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gr = gr * clip;
                *mi = b1 * *mi + one_b1 * gr;
                *vi = b2 * *vi + one_b2 * gr * gr;
                *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Linear warm-up over `warmup_frac` of the run, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_frac * total).ceil();
        let s = step as f64;
        if s < warm {
            return self.base_lr * (s + 1.0) / warm;
        }
        let progress = ((s - warm) / (total - warm).max(1.0)).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn zero_lr_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let g = vec![Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap()];
        opt.step(&mut store, &g, 0.0).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[1], &[5.0]).unwrap());
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let w = p.var(store.id("w").unwrap());
            let sq = g.mul(w, w).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            let grads = store.grads(&g, &p);
            opt.step(&mut store, &grads, 0.1).unwrap();
        }
        assert!(store.by_name("w").unwrap().data()[0].abs() < 1e-2);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base_lr: 1.0,
            total_steps: 100,
            warmup_frac: 0.03,
        };
        assert!(s.lr(0) < s.lr(2));
        assert!((s.lr(3) - 1.0).abs() < 1e-12);
        assert!(s.lr(99) < 0.01);
        assert!(s.lr(50) < s.lr(20));
    }
}
