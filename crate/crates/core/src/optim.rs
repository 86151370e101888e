//! AdamW (decoupled weight decay) with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serializable optimizer state (moments stored as `f64`, which holds
/// every `f32` exactly).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub first_moment: Vec<Option<Vec<f64>>>,
    pub second_moment: Vec<Option<Vec<f64>>>,
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters whose mask entry is false, or that
    /// received no gradient, are left untouched bit for bit.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], trainable: &[bool]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = T::of(1.0 - c.beta1.powf(t));
        let bc2 = T::of(1.0 - c.beta2.powf(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads[i].as_ref() else { continue };
            if !trainable[i] {
                continue;
            }
            let p = store.get_mut(id).value.data_mut();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); p.len()]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> AdamWState {
        let conv = |xs: &Vec<Option<Vec<T>>>| {
            xs.iter()
                .map(|o| o.as_ref().map(|v| v.iter().map(|x| x.f64()).collect()))
                .collect()
        };
        AdamWState {
            step: self.step,
            first_moment: conv(&self.m),
            second_moment: conv(&self.v),
        }
    }

    pub fn restore(config: AdamWConfig, state: &AdamWState) -> Self {
        let conv = |xs: &Vec<Option<Vec<f64>>>| {
            xs.iter()
                .map(|o| o.as_ref().map(|v| v.iter().map(|&x| T::of(x)).collect()))
                .collect()
        };
        Self {
            config,
            step: state.step,
            m: conv(&state.first_moment),
            v: conv(&state.second_moment),
        }
    }
}

/// Rescales gradients in place so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.f64();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", "g", Tensor::from_f64(&[2], &[1.0, -1.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 1);
        opt.step(&mut store, &[Some(vec![0.5, -2.0])], &[true]);
        let v = store.get(id).value.data();
        // bias-corrected first step is lr * sign(g)
        assert!((v[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((v[1] - (-1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn masked_parameters_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", "g", Tensor::from_f64(&[1], &[0.3]));
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        opt.step(&mut store, &[Some(vec![1.0])], &[false]);
        assert_eq!(store.get(id).value.data()[0].to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0f64, 4.0]), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let v = g[0].as_ref().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }
}
