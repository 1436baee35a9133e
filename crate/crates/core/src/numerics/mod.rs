//! Dense tensors, reverse-mode differentiation and the kernel set the model
//! uses. The functions in this module evaluate a single operation on plain
//! tensors; graph-building versions live on [`Graph`].

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, ActivationKind, Conv2dSpec, Gradients, Graph, Var};
pub use layers::{Conv2d, LayerNorm, Linear};
pub use optim::{AdamWConfig, OptimState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

fn eval(inputs: Vec<Tensor>, f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = inputs.into_iter().map(|t| g.input(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize, padding: usize) -> Result<Tensor> {
    conv2d_strided(input, weight, bias, Conv2dSpec { groups, stride: 1, padding })
}

pub fn conv2d_strided(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    eval(vec![input.clone(), weight.clone(), bias.clone()], |g, v| g.conv2d(v[0], v[1], v[2], spec))
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    eval(vec![x.clone(), weight.clone(), bias.clone()], |g, v| g.linear(v[0], v[1], v[2]))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eval(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| g.layer_norm(v[0], v[1], v[2], eps))
}

pub fn activation(x: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    eval(vec![x.clone()], |g, v| g.activation(v[0], kind))
}

pub fn softmax_over_positions(x: &Tensor) -> Result<Tensor> {
    eval(vec![x.clone()], |g, v| g.softmax_positions(v[0]))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(eval(vec![a.clone(), b.clone()], |g, v| g.cosine(v[0], v[1]))?.data()[0])
}

/// Mean of `features` (`[h, w, c]`) over positions where `mask` (`[h, w]`) is set.
pub fn masked_pool(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let weights = mask.data().to_vec();
    eval(vec![features.clone()], |g, v| g.masked_pool(v[0], &weights))
}
