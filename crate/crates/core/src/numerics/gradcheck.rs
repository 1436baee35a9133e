//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{CorError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Checks at most this many coordinates per tensor (seeded sample).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Anything other than
    /// 1.0 deliberately corrupts the check.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, max_coords: None, seed: 0, analytic_scale: 1.0 }
    }
}

impl GradCheckOptions {
    pub fn sampled(max_coords: usize) -> Self {
        GradCheckOptions { max_coords: Some(max_coords), ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (tensor index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.coords_checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((tensor, coord));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.coords_checked += other.coords_checked;
    }
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(CorError::dim(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Compares analytic gradients of `f` with respect to every tensor in
/// `inputs` against central differences. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for j in coords(inputs[ti].numel(), opts, ti as u64) {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            report.record(ti, j, analytic[j] * opts.analytic_scale, (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(report)
}

/// Same check, but with respect to stored parameters that `f` binds itself.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut work = store.clone();
    for p in work.iter_mut() {
        p.frozen = false;
        p.tensor.set_requires_grad(true);
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(&work);
        let out = f(&mut g)?;
        scalar_of(&g, out)?;
        let grads = g.backward(out)?;
        let by_id: std::collections::HashMap<ParamId, Vec<f64>> =
            grads.params().map(|(id, gr)| (id, gr.to_vec())).collect();
        ids.iter()
            .map(|id| by_id.get(id).cloned().unwrap_or_else(|| vec![0.0; work.tensor(*id).numel()]))
            .collect()
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };

    let mut report = GradCheckReport::default();
    for (ti, id) in ids.iter().enumerate() {
        for j in coords(work.tensor(*id).numel(), opts, ti as u64) {
            let orig = work.tensor(*id).data()[j];
            work.tensor_mut(*id).data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work.tensor_mut(*id).data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work.tensor_mut(*id).data_mut()[j] = orig;
            report.record(ti, j, analytic[ti][j] * opts.analytic_scale, (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(report)
}
