use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{CorError, Result};

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
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        OptimState {
            config,
            step: 0,
            first: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// State sized for every parameter of `store` (frozen ones never move).
    pub fn for_store(config: AdamWConfig, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.tensor.numel()).collect();
        Self::new(config, &sizes)
    }

    /// One decoupled-weight-decay Adam update. `grads[i] == None` is a zero
    /// gradient.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(CorError::dim(format!(
                "adamw: {} parameters, {} gradients, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.is_some_and(|g| g.len() != p.len()) {
                return Err(CorError::dim(format!("adamw: shape mismatch at parameter {i}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = grads[i].map_or(0.0, |g| g[j]);
                p[j] -= c.lr * c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Updates tensors from their own grad slots.
    pub fn step_tensors(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|t| t.grad().map(<[f64]>::to_vec)).collect();
        let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
        self.update(&mut slices, &grad_refs)
    }

    /// Updates every trainable parameter of `store`; frozen entries are skipped.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(CorError::dim("adamw: store does not match optimizer state"));
        }
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        let mut keep = Vec::new();
        for (i, p) in store.iter_mut().enumerate() {
            if !p.frozen {
                tensors.push(&mut p.tensor);
                keep.push(i);
            }
        }
        // run the update on the trainable subset only
        let mut sub = OptimState {
            config: self.config,
            step: self.step,
            first: keep.iter().map(|i| std::mem::take(&mut self.first[*i])).collect(),
            second: keep.iter().map(|i| std::mem::take(&mut self.second[*i])).collect(),
        };
        let res = sub.step_tensors(&mut tensors);
        for (k, i) in keep.iter().enumerate() {
            self.first[*i] = std::mem::take(&mut sub.first[k]);
            self.second[*i] = std::mem::take(&mut sub.second[k]);
        }
        self.step = sub.step;
        res
    }
}
