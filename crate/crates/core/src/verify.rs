//! Finite-difference verification of every differentiable kernel and of the
//! model's composite graphs, as one table.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avti::Avti;
use crate::backbones::BackboneConfig;
use crate::error::Result;
use crate::losses::{downsample_mask, loss_cor, loss_total, ContrastiveInput, EmptyMaskPolicy, LossConfig, LossInput};
use crate::model::{CoreModel, ModelConfig, QueryInputs};
use crate::numerics::graph::DIFFERENTIABLE_OPS;
use crate::numerics::{
    grad_check, grad_check_params, ActivationKind, Conv2dSpec, GradCheckOptions, GradCheckReport, Graph, ParamId,
    ParamStore, Tensor, Var,
};
use crate::rre::{Rre, RreConfig, SfeBlock, SFE_BLOCKS};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const EPSILON: f64 = 1e-4;

pub const COMPOSITES: [&str; 6] = ["sfe3", "rre", "avti", "l_cor", "l_seg", "l_total"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Kernel,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub kind: CheckKind,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckTable {
    pub entries: Vec<CheckEntry>,
}

impl CheckTable {
    pub fn all_passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<20} {:<10} {:>12} {:>8} {:>8}  status\n", "check", "kind", "max_rel_err", "coords", "secs");
        for e in &self.entries {
            let kind = match e.kind {
                CheckKind::Kernel => "kernel",
                CheckKind::Composite => "composite",
            };
            out.push_str(&format!(
                "{:<20} {:<10} {:>12.3e} {:>8} {:>8.2}  {}\n",
                e.name,
                kind,
                e.max_rel_error,
                e.coords,
                e.seconds,
                if e.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Away from zero so ReLU never sits on its kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Contracts any output with fixed, non-uniform weights.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 17) as f64 / 17.0 - 0.45);
    let w = g.input(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type KernelFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, KernelFn)> {
    let n = 36;
    let gt: Vec<f64> = (0..n).map(|i| if (i / 6) % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let wts: Vec<f64> = (0..n).map(|i| 1.0 + (i % 5) as f64 * 0.5).collect();
    let pool_mask: Vec<f64> = (0..16).map(|i| if i % 3 == 1 { 1.0 } else { 0.3 * (i % 2) as f64 }).collect();
    let (gt2, wts2) = (gt.clone(), wts.clone());
    vec![
        ("add", vec![random(&[3, 4], rng), random(&[3, 4], rng)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        })),
        ("sub", vec![random(&[3, 4], rng), random(&[3, 4], rng)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        })),
        ("mul", vec![random(&[3, 4], rng), random(&[3, 4], rng)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        })),
        ("affine", vec![random(&[5], rng)], Box::new(|g, v| {
            let y = g.affine(v[0], -1.7, 0.3)?;
            project(g, y)
        })),
        ("mul_scalar", vec![random(&[1], rng), random(&[2, 3], rng)], Box::new(|g, v| {
            let y = g.mul_scalar(v[0], v[1])?;
            project(g, y)
        })),
        ("sum", vec![random(&[2, 3], rng)], Box::new(|g, v| {
            let y = g.sum(v[0])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })),
        ("reshape", vec![random(&[2, 6], rng)], Box::new(|g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y)
        })),
        ("concat_last", vec![random(&[2, 2, 3], rng), random(&[2, 2, 1], rng)], Box::new(|g, v| {
            let y = g.concat_last(&[v[0], v[1]])?;
            project(g, y)
        })),
        ("matmul", vec![random(&[3, 4], rng), random(&[4, 2], rng)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        })),
        ("transpose", vec![random(&[3, 4], rng)], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            project(g, y)
        })),
        ("mean_rows", vec![random(&[5, 3], rng)], Box::new(|g, v| {
            let y = g.mean_rows(v[0])?;
            project(g, y)
        })),
        ("linear", vec![random(&[3, 4], rng), random(&[4, 5], rng), random(&[5], rng)], Box::new(|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y)
        })),
        ("conv2d", vec![random(&[5, 5, 4], rng), random(&[3, 3, 4, 3], rng), random(&[3], rng)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec::dense(1, 1))?;
            project(g, y)
        })),
        ("conv2d_grouped", vec![random(&[5, 5, 4], rng), random(&[3, 3, 2, 4], rng), random(&[4], rng)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec { groups: 2, stride: 2, padding: 1 })?;
            project(g, y)
        })),
        ("conv2d_depthwise", vec![random(&[6, 6, 3], rng), random(&[7, 7, 1, 3], rng), random(&[3], rng)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], Conv2dSpec { groups: 3, stride: 1, padding: 3 })?;
            project(g, y)
        })),
        ("layer_norm", vec![random(&[3, 2, 5], rng), random(&[5], rng), random(&[5], rng)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y)
        })),
        ("gelu", vec![random(&[10], rng)], Box::new(|g, v| {
            let y = g.activation(v[0], ActivationKind::Gelu)?;
            project(g, y)
        })),
        ("relu", vec![off_zero(&[10], rng)], Box::new(|g, v| {
            let y = g.activation(v[0], ActivationKind::Relu)?;
            project(g, y)
        })),
        ("sigmoid", vec![random(&[10], rng)], Box::new(|g, v| {
            let y = g.activation(v[0], ActivationKind::Sigmoid)?;
            project(g, y)
        })),
        ("softmax_positions", vec![random(&[3, 3, 2], rng)], Box::new(|g, v| {
            let y = g.softmax_positions(v[0])?;
            project(g, y)
        })),
        ("masked_pool", vec![random(&[4, 4, 3], rng)], Box::new(move |g, v| {
            let y = g.masked_pool(v[0], &pool_mask)?;
            project(g, y)
        })),
        ("cosine", vec![random(&[6], rng), random(&[6], rng)], Box::new(|g, v| g.cosine(v[0], v[1]))),
        ("upsample_bilinear", vec![random(&[3, 3, 2], rng)], Box::new(|g, v| {
            let y = g.upsample_bilinear(v[0], 7, 5)?;
            project(g, y)
        })),
        ("weighted_bce", vec![random(&[6, 6], rng)], Box::new(move |g, v| g.weighted_bce(v[0], &gt, &wts))),
        ("weighted_iou", vec![random(&[6, 6], rng)], Box::new(move |g, v| g.weighted_iou(v[0], &gt2, &wts2, 1.0))),
    ]
}

/// Which registered op a kernel case exercises.
fn op_of(case: &str) -> &str {
    match case {
        "conv2d_grouped" | "conv2d_depthwise" => "conv2d",
        "gelu" | "relu" | "sigmoid" => "activation",
        other => other,
    }
}

fn entry(name: &str, kind: CheckKind, report: &GradCheckReport, start: Instant) -> CheckEntry {
    CheckEntry {
        name: name.to_string(),
        kind,
        max_rel_error: report.max_rel_error,
        coords: report.coords_checked,
        passed: report.coords_checked > 0 && report.max_rel_error < TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn kernel_checks(analytic_scale: f64) -> Result<Vec<CheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = GradCheckOptions { eps: EPSILON, analytic_scale, ..GradCheckOptions::default() };
    kernel_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| {
            let start = Instant::now();
            let report = grad_check(|g, v| f(g, v), &inputs, &opts)?;
            Ok(entry(name, CheckKind::Kernel, &report, start))
        })
        .collect()
}

/// Kernel-case names grouped by the registered op they cover; every entry of
/// the op registry must appear.
pub fn kernel_coverage() -> Vec<(&'static str, Vec<&'static str>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<&'static str> = kernel_cases(&mut rng).into_iter().map(|c| c.0).collect();
    DIFFERENTIABLE_OPS
        .iter()
        .map(|op| (*op, cases.iter().copied().filter(|c| op_of(c) == *op).collect()))
        .collect()
}

/// Small configuration used for end-to-end checks: 16×16 images.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_size: 16,
            target_grid: 4,
            reference_grid: 2,
            channels: 8,
            text_vocab: 64,
            decoder_hidden: 8,
            ..BackboneConfig::default()
        },
        k: 2,
        ..ModelConfig::default()
    }
}

/// A 16×16 query whose foreground covers part of the 4×4 target grid.
pub fn toy_sample(seed: u64) -> (QueryInputs, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let square = |lo: usize, hi: usize| {
        Tensor::from_fn(&[16, 16], |i| {
            let (y, x) = (i / 16, i % 16);
            ((lo..hi).contains(&y) && (lo..hi).contains(&x)) as u8 as f64
        })
    };
    let inputs = QueryInputs {
        target: random(&[16, 16, 3], &mut rng),
        reference: random(&[16, 16, 3], &mut rng),
        ref_mask: square(3, 11),
        text: "change the color to red".into(),
    };
    (inputs, square(4, 12).into_data())
}

fn store_with_inputs(store: &mut ParamStore, tensors: &[(&str, Tensor)]) -> Vec<ParamId> {
    tensors.iter().map(|(name, t)| store.add(format!("input.{name}"), t.clone(), false)).collect()
}

fn composite(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    f: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<CheckEntry> {
    let start = Instant::now();
    let report = grad_check_params(store, ids, f, opts)?;
    Ok(entry(name, CheckKind::Composite, &report, start))
}

pub fn composite_checks(analytic_scale: f64) -> Result<Vec<CheckEntry>> {
    let opts = GradCheckOptions { eps: EPSILON, analytic_scale, ..GradCheckOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 8;
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let x = store_with_inputs(&mut store, &[("x", random(&[6, 6, c], &mut rng))])[0];
        let blocks: Vec<SfeBlock> =
            (0..SFE_BLOCKS).map(|i| SfeBlock::new(&mut store, &format!("sfe{i}"), c, false, &mut rng)).collect();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        out.push(composite("sfe3", &store, &ids, &opts, |g| {
            let mut h = g.param(x)?;
            for b in &blocks {
                h = b.forward(g, h)?;
            }
            project(g, h)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let inp = store_with_inputs(&mut store, &[("f_ref", random(&[4, 4, c], &mut rng)), ("f_mask", random(&[4, 4, c], &mut rng))]);
        let rre = Rre::new(&mut store, RreConfig { k: 3, channels: c }, false, &mut rng)?;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        out.push(composite("rre", &store, &ids, &opts, |g| {
            let (r, m) = (g.param(inp[0])?, g.param(inp[1])?);
            let y = rre.forward(g, r, m)?;
            project(g, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let inp = store_with_inputs(&mut store, &[("f_rre", random(&[c], &mut rng)), ("f_txt", random(&[c], &mut rng))]);
        let avti = Avti::new(&mut store, c, false, &mut rng);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        out.push(composite("avti", &store, &ids, &opts, |g| {
            let (r, t) = (g.param(inp[0])?, g.param(inp[1])?);
            let y = avti.compose(g, r, t)?;
            project(g, y.f_avti)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let ids = store_with_inputs(
            &mut store,
            &[
                ("features_a", random(&[4, 4, c], &mut rng)),
                ("prompt_a", random(&[c], &mut rng)),
                ("features_b", random(&[4, 4, c], &mut rng)),
                ("prompt_b", random(&[c], &mut rng)),
            ],
        );
        let grid_a: Vec<f64> = (0..16).map(|i| (i % 4 < 2) as u8 as f64).collect();
        let grid_b: Vec<f64> = (0..16).map(|i| (i / 4 == 1) as u8 as f64).collect();
        out.push(composite("l_cor", &store, &ids, &opts, |g| {
            let v: Vec<Var> = ids.iter().map(|id| g.param(*id)).collect::<Result<_>>()?;
            let batch = [
                ContrastiveInput { features: v[0], gt_grid: &grid_a, prompt: v[1] },
                ContrastiveInput { features: v[2], gt_grid: &grid_b, prompt: v[3] },
            ];
            Ok(loss_cor(g, &batch, EmptyMaskPolicy::Error)?.2)
        })?);
    }

    {
        let (_, gt) = toy_sample(1);
        let mut store = ParamStore::new();
        let ids = store_with_inputs(&mut store, &[("logits", random(&[16, 16], &mut rng))]);
        let grid = downsample_mask(&gt, 16, 16, 4, 4)?;
        let cfg = LossConfig { contrastive: false, ..LossConfig::default() };
        out.push(composite("l_seg", &store, &ids, &opts, |g| {
            let z = g.param(ids[0])?;
            let dummy = g.input(Tensor::zeros(&[4, 4, 1]))?;
            let prompt = g.input(Tensor::zeros(&[1]))?;
            let input = LossInput { contrastive: ContrastiveInput { features: dummy, gt_grid: &grid, prompt }, logits: z, gt: &gt };
            Ok(loss_total(g, &[input], &cfg)?.l_seg)
        })?);
    }

    out.push(l_total_check(&opts)?);
    Ok(out)
}

/// End-to-end `L_total` of the toy model on a two-sample batch, with respect
/// to every trainable parameter.
fn l_total_check(opts: &GradCheckOptions) -> Result<CheckEntry> {
    let model = CoreModel::new(toy_model_config())?;
    let samples: Vec<(QueryInputs, Vec<f64>)> = (0..2).map(|s| toy_sample(10 + s)).collect();
    let grids: Vec<Vec<f64>> = samples.iter().map(|(_, gt)| downsample_mask(gt, 16, 16, 4, 4)).collect::<Result<_>>()?;
    let caches = samples.iter().map(|(q, _)| model.precompute(q)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    let cfg = LossConfig::default();
    composite("l_total", &model.store, &ids, opts, |g| {
        let mut inputs = Vec::new();
        for (i, (q, gt)) in samples.iter().enumerate() {
            let o = model.forward(g, q, Some(&caches[i]))?;
            inputs.push(LossInput {
                contrastive: ContrastiveInput { features: o.f_tar_proj, gt_grid: &grids[i], prompt: o.f_avti },
                logits: o.logits,
                gt,
            });
        }
        Ok(loss_total(g, &inputs, &cfg)?.l_total)
    })
}

/// Every kernel, then every composite. `analytic_scale != 1` corrupts the
/// analytic side on purpose.
pub fn run_suite(analytic_scale: f64) -> Result<CheckTable> {
    let mut entries = kernel_checks(analytic_scale)?;
    entries.extend(composite_checks(analytic_scale)?);
    Ok(CheckTable { entries })
}
