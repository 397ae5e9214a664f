use std::f64::consts::PI;

use crate::error::{contract_err, Result};
use crate::model::layer_id;
use crate::tensor::ParamStore;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update count.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Per-tensor learning-rate multiplier.
    pub lr_scale: Vec<f64>,
    /// Per-tensor weight-decay switch.
    pub decay: Vec<bool>,
}

impl AdamW {
    /// Moments start at zero; matrices decay, vectors (biases, norms, tokens) do not.
    pub fn new(store: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            v: m.clone(),
            m,
            lr_scale: vec![1.0; store.len()],
            decay: store.iter().map(|(_, _, t)| t.rank() >= 2).collect(),
        }
    }

    /// Sets `lr_scale = decay^(depth + 1 - layer)` by parameter name.
    pub fn set_layer_decay(&mut self, store: &ParamStore, depth: usize, decay: f64) {
        for (id, name, _) in store.iter() {
            let layer = layer_id(name, depth);
            self.lr_scale[id.0] = decay.powi((depth + 1 - layer) as i32);
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return contract_err(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.m.len(),
                store.len()
            ));
        }
        for (id, name, t) in store.iter() {
            if self.m[id.0].len() != t.numel() || self.v[id.0].len() != t.numel() {
                return contract_err(format!("optimizer state for `{name}` does not match its shape"));
            }
            if let Some(g) = &t.grad {
                if g.len() != t.numel() {
                    return contract_err(format!("gradient for `{name}` does not match its shape"));
                }
            }
        }
        Ok(())
    }

    /// One update from the gradients accumulated in `store`. Frozen tensors and
    /// tensors without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.check(store)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let lr_i = lr * self.lr_scale[i];
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let tensor = store.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p *= 1.0 - lr_i * wd;
                *p -= lr_i * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 100, 10, 1.0), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, 1.0), 1.0);
        assert!((lr_schedule(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!(lr_schedule(99, 100, 10, 1.0) < 1e-3);
        let before = lr_schedule(9, 100, 10, 1.0);
        let after = lr_schedule(10, 100, 10, 1.0);
        assert!((after - before - 0.1).abs() < 1e-12);
    }

    #[test]
    fn layer_decay_ratios() {
        let mut store = ParamStore::new();
        store.insert("patch_embed.weight", Tensor::zeros(&[2, 2]));
        store.insert("encoder.blocks.0.norm1.gamma", Tensor::zeros(&[2]));
        store.insert("encoder.blocks.1.norm1.gamma", Tensor::zeros(&[2]));
        store.insert("head.weight", Tensor::zeros(&[2, 2]));
        let mut opt = AdamW::new(&store, (0.9, 0.999), 0.05);
        opt.set_layer_decay(&store, 2, 0.65);
        let s = &opt.lr_scale;
        assert_eq!(s[3], 1.0);
        assert!((s[2] - 0.65).abs() < 1e-12);
        assert!((s[1] - 0.4225).abs() < 1e-12);
        opt.set_layer_decay(&store, 2, 1.0);
        assert!(opt.lr_scale.iter().all(|&x| x == 1.0));
        assert_eq!(opt.decay, vec![true, false, false, true]);
    }

    #[test]
    fn first_step_is_sign_sized() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        store.get_mut(id).grad = Some(vec![0.3, -2.0]);
        let mut opt = AdamW::new(&store, (0.9, 0.95), 0.0);
        opt.step(&mut store, 0.1).unwrap();
        let v = store.get(id).values();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::filled(&[2, 2], 0.7));
        store.get_mut(id).grad = Some(vec![0.0; 4]);
        let mut opt = AdamW::new(&store, (0.9, 0.95), 0.0);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).values(), &[0.7; 4]);
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]));
        let mut opt = AdamW::new(&store, (0.9, 0.95), 0.0);
        opt.m[0].pop();
        assert!(matches!(opt.step(&mut store, 0.1), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[2]));
        store.get_mut(id).grad = Some(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 0.02), 5.0);
        assert!((store.grad_norm() - 0.02).abs() < 1e-15);
    }
}
