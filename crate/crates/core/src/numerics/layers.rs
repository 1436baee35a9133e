use rand::Rng;

use super::graph::{Conv2dSpec, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, frozen: bool, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[input, output], input, frozen, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]), frozen);
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight)?, g.param(self.bias)?);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        spec: Conv2dSpec,
        frozen: bool,
        rng: &mut R,
    ) -> Self {
        let cin_g = input / spec.groups;
        let fan_in = kernel * kernel * cin_g;
        let weight = store.add_uniform(format!("{name}.weight"), &[kernel, kernel, cin_g, output], fan_in, frozen, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]), frozen);
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight)?, g.param(self.bias)?);
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, frozen: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), frozen);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), frozen);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma)?, g.param(self.beta)?);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Zeroes every parameter of the listed ids.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for id in ids {
        store.tensor_mut(*id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
