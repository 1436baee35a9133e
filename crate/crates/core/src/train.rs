//! Sample loading, the training loop and batch prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::image_tensor;
use crate::dataset::{load_rgb, CorSample, Manifest, Mask, Setting, Split};
use crate::error::{CorError, Result};
use crate::losses::{downsample_mask, loss_total, ContrastiveInput, LossBreakdown, LossConfig, LossInput};
use crate::metrics::{evaluate, EvalItem, EvalReport};
use crate::model::{CoreModel, FrozenFeatures, QueryInputs};
use crate::numerics::{AdamWConfig, Graph, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 15, lr: 1e-4, batch_size: 6, seed: 42, weight_decay: 0.01, loss: LossConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(CorError::Input(format!("learning rate {} and batch size {} must be positive", self.lr, self.batch_size)));
        }
        self.loss.validate()
    }
}

/// A sample with decoded inputs, ground truth and cached frozen features.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub pair_id: String,
    pub split: Split,
    pub setting: Setting,
    pub inputs: QueryInputs,
    pub cache: FrozenFeatures,
    /// Union ground truth at image resolution.
    pub gt: Vec<f64>,
    /// Union ground truth on the target feature grid.
    pub gt_grid: Vec<f64>,
}

fn rgb_tensor(root: &Path, rel: &Path, size: usize) -> Result<crate::numerics::Tensor> {
    let path = root.join(rel);
    let img = load_rgb(&path)?;
    if img.dimensions() != (size as u32, size as u32) {
        return Err(CorError::Image { path, message: format!("expected {size}x{size}, got {:?}", img.dimensions()) });
    }
    image_tensor(img.as_raw(), size, size)
}

/// Decodes one manifest record; paths are relative to `root`.
pub fn load_query(root: &Path, s: &CorSample, size: usize) -> Result<(QueryInputs, Mask)> {
    let ref_mask = Mask::load(&root.join(&s.ref_mask))?;
    let gt = s.union_target(root)?;
    for m in [&ref_mask, &gt] {
        if (m.height, m.width) != (size, size) {
            return Err(CorError::dim(format!("{}: mask is {}x{}, expected {size}", s.pair_id, m.height, m.width)));
        }
    }
    let inputs = QueryInputs {
        target: rgb_tensor(root, &s.target_image, size)?,
        reference: rgb_tensor(root, &s.ref_image, size)?,
        ref_mask: ref_mask.to_tensor(),
        text: s.retrieval_text.clone(),
    };
    Ok((inputs, gt))
}

pub fn prepare(model: &CoreModel, samples: &[&CorSample], root: &Path) -> Result<Vec<PreparedSample>> {
    let bc = &model.config.backbone;
    samples
        .iter()
        .map(|s| {
            let (inputs, gt) = load_query(root, s, bc.image_size)?;
            let gt = gt.to_f64();
            let gt_grid = downsample_mask(&gt, bc.image_size, bc.image_size, bc.target_grid, bc.target_grid)?;
            Ok(PreparedSample {
                pair_id: s.pair_id.clone(),
                split: s.split,
                setting: s.setting()?,
                cache: model.precompute(&inputs)?,
                inputs,
                gt,
                gt_grid,
            })
        })
        .collect()
}

pub fn prepare_split(model: &CoreModel, manifest: &Manifest, root: &Path, split: Split) -> Result<Vec<PreparedSample>> {
    let samples: Vec<&CorSample> = manifest.split(split).collect();
    prepare(model, &samples, root)
}

/// One epoch's sample-weighted mean losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

impl EpochLog {
    /// Tab-separated; the contrastive columns only appear when present.
    pub fn header(contrastive: bool) -> String {
        let mut cols = vec!["epoch", "l_total", "l_seg", "l_wbce", "l_wiou"];
        if contrastive {
            cols.extend(["l_cor", "l_fg", "l_bg"]);
        }
        cols.join("\t")
    }

    pub fn row(&self) -> String {
        let l = &self.losses;
        let mut cols = vec![self.epoch.to_string()];
        cols.extend([l.l_total, l.l_seg, l.l_wbce, l.l_wiou].iter().map(|v| format!("{v:.6}")));
        if let (Some(c), Some(f), Some(b)) = (l.l_cor, l.l_fg, l.l_bg) {
            cols.extend([c, f, b].iter().map(|v| format!("{v:.6}")));
        }
        cols.join("\t")
    }
}

/// Builds the batch graph, backpropagates, and returns the loss values with
/// the gradients already accumulated into the model's parameter slots.
pub fn batch_step(model: &mut CoreModel, batch: &[&PreparedSample], loss: &LossConfig) -> Result<LossBreakdown> {
    let (values, grads) = {
        let mut g = Graph::with_params(&model.store);
        let mut outs = Vec::with_capacity(batch.len());
        for s in batch {
            outs.push(model.forward(&mut g, &s.inputs, Some(&s.cache))?);
        }
        let inputs: Vec<LossInput> = batch
            .iter()
            .zip(&outs)
            .map(|(s, o)| LossInput {
                contrastive: ContrastiveInput { features: o.f_tar_proj, gt_grid: &s.gt_grid, prompt: o.f_avti },
                logits: o.logits,
                gt: &s.gt,
            })
            .collect();
        let vars = loss_total(&mut g, &inputs, loss)?;
        let grads = g.backward(vars.l_total)?;
        (vars.values(&g), grads)
    };
    model.store.accumulate(&grads)?;
    Ok(values)
}

fn weighted_mean(acc: &mut Option<LossBreakdown>, b: &LossBreakdown, w: f64) {
    let add = |a: Option<f64>, v: Option<f64>| match (a, v) {
        (Some(a), Some(v)) => Some(a + w * v),
        _ => None,
    };
    *acc = Some(match acc.take() {
        None => LossBreakdown {
            l_fg: b.l_fg.map(|v| w * v),
            l_bg: b.l_bg.map(|v| w * v),
            l_cor: b.l_cor.map(|v| w * v),
            l_wbce: w * b.l_wbce,
            l_wiou: w * b.l_wiou,
            l_seg: w * b.l_seg,
            l_total: w * b.l_total,
        },
        Some(a) => LossBreakdown {
            l_fg: add(a.l_fg, b.l_fg),
            l_bg: add(a.l_bg, b.l_bg),
            l_cor: add(a.l_cor, b.l_cor),
            l_wbce: a.l_wbce + w * b.l_wbce,
            l_wiou: a.l_wiou + w * b.l_wiou,
            l_seg: a.l_seg + w * b.l_seg,
            l_total: a.l_total + w * b.l_total,
        },
    });
}

/// AdamW over shuffled mini-batches; only trainable parameters move.
pub fn train(model: &mut CoreModel, data: &[PreparedSample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CorError::Input("training split is empty".into()));
    }
    let adam = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut optim = OptimState::for_store(adam, &model.store);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut acc = None;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|i| &data[*i]).collect();
            model.store.zero_grad();
            let b = batch_step(model, &batch, &cfg.loss)?;
            optim.step_store(&mut model.store)?;
            weighted_mean(&mut acc, &b, chunk.len() as f64 / data.len() as f64);
        }
        model.store.zero_grad();
        let losses = acc.expect("at least one batch");
        log::info!("epoch {} total {:.5} seg {:.5}", epoch + 1, losses.l_total, losses.l_seg);
        logs.push(EpochLog { epoch: epoch + 1, losses });
    }
    Ok(logs)
}

pub fn predict_all(model: &CoreModel, data: &[PreparedSample]) -> Result<Vec<Vec<f64>>> {
    data.iter().map(|s| Ok(model.predict(&s.inputs, Some(&s.cache))?.into_data())).collect()
}

pub fn evaluate_predictions(method: &str, data: &[PreparedSample], predictions: &[Vec<f64>]) -> Result<EvalReport> {
    let items: Vec<EvalItem> =
        data.iter().map(|s| EvalItem { split: s.split.as_str(), setting: s.setting, gt: &s.gt }).collect();
    evaluate(method, &items, predictions)
}

pub fn evaluate_model(model: &CoreModel, data: &[PreparedSample]) -> Result<EvalReport> {
    let preds = predict_all(model, data)?;
    evaluate_predictions("core", data, &preds)
}
