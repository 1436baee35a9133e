//! Overlap metrics and the per-split, per-setting evaluation protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Setting;
use crate::error::{CorError, Result};

pub const BINARY_THRESHOLD: f64 = 0.5;
pub const SOFT_THRESHOLDS: usize = 256;

/// Thresholds `(i + 0.5) / 256`, which never hit 0 or 1.
pub fn threshold_grid() -> Vec<f64> {
    (0..SOFT_THRESHOLDS).map(|i| (i as f64 + 0.5) / SOFT_THRESHOLDS as f64).collect()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CorError::dim(format!("prediction has {} pixels, ground truth {}", a.len(), b.len())));
    }
    Ok(())
}

/// (|P ∩ G|, |P|, |G|) with `P = pred ≥ t` and `G = gt > 0.5`.
fn counts(pred: &[f64], gt: &[f64], t: f64) -> (usize, usize, usize) {
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (pv, gv) in pred.iter().zip(gt) {
        let (pb, gb) = (*pv >= t, *gv > 0.5);
        p += pb as usize;
        g += gb as usize;
        inter += (pb && gb) as usize;
    }
    (inter, p, g)
}

fn dice_of(inter: usize, p: usize, g: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

fn iou_of(inter: usize, p: usize, g: usize) -> f64 {
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Dice of two binary masks (values > 0.5 are foreground).
pub fn dice(pred_bin: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred_bin, gt)?;
    let (i, p, g) = counts(pred_bin, gt, BINARY_THRESHOLD);
    Ok(dice_of(i, p, g))
}

pub fn iou(pred_bin: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred_bin, gt)?;
    let (i, p, g) = counts(pred_bin, gt, BINARY_THRESHOLD);
    Ok(iou_of(i, p, g))
}

pub fn mae(pred_soft: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred_soft, gt)?;
    if pred_soft.is_empty() {
        return Ok(0.0);
    }
    Ok(pred_soft.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred_soft.len() as f64)
}

/// Dice and IoU of `pred ≥ t` for every threshold of [`threshold_grid`],
/// computed with one sort instead of 256 passes.
fn swept(pred_soft: &[f64], gt: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<(f64, bool)> = pred_soft.iter().zip(gt).map(|(p, g)| (*p, *g > 0.5)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let g_total = order.iter().filter(|(_, g)| *g).count();
    let grid = threshold_grid();
    let (mut dices, mut ious) = (vec![0.0; grid.len()], vec![0.0; grid.len()]);
    let (mut idx, mut p, mut inter) = (0, 0, 0);
    for (k, t) in grid.iter().enumerate().rev() {
        while idx < order.len() && order[idx].0 >= *t {
            p += 1;
            inter += order[idx].1 as usize;
            idx += 1;
        }
        dices[k] = dice_of(inter, p, g_total);
        ious[k] = iou_of(inter, p, g_total);
    }
    (dices, ious)
}

pub fn m_dice(pred_soft: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred_soft, gt)?;
    let (d, _) = swept(pred_soft, gt);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

pub fn m_iou(pred_soft: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred_soft, gt)?;
    let (_, i) = swept(pred_soft, gt);
    Ok(i.iter().sum::<f64>() / i.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub m_dice: f64,
    pub m_iou: f64,
}

impl MetricSet {
    pub fn of_sample(pred_soft: &[f64], gt: &[f64]) -> Result<Self> {
        check_len(pred_soft, gt)?;
        let (i, p, g) = counts(pred_soft, gt, BINARY_THRESHOLD);
        let (dices, ious) = swept(pred_soft, gt);
        Ok(MetricSet {
            dice: dice_of(i, p, g),
            iou: iou_of(i, p, g),
            mae: mae(pred_soft, gt)?,
            m_dice: dices.iter().sum::<f64>() / dices.len() as f64,
            m_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        })
    }

    /// Per-sample (macro) mean.
    pub fn mean(sets: &[MetricSet]) -> MetricSet {
        if sets.is_empty() {
            return MetricSet::default();
        }
        let n = sets.len() as f64;
        let sum = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        MetricSet {
            dice: sum(|m| m.dice),
            iou: sum(|m| m.iou),
            mae: sum(|m| m.mae),
            m_dice: sum(|m| m.m_dice),
            m_iou: sum(|m| m.m_iou),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub count: usize,
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub overall: Stratum,
    pub settings: BTreeMap<String, Stratum>,
}

/// Keyed by split name, then setting label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub splits: BTreeMap<String, SplitReport>,
}

/// What `evaluate` needs to know about each sample.
#[derive(Clone, Debug)]
pub struct EvalItem<'a> {
    pub split: &'a str,
    pub setting: Setting,
    /// Union ground truth.
    pub gt: &'a [f64],
}

pub fn evaluate(method: &str, items: &[EvalItem], predictions: &[Vec<f64>]) -> Result<EvalReport> {
    if items.len() != predictions.len() {
        return Err(CorError::Input(format!("{} samples but {} predictions", items.len(), predictions.len())));
    }
    let mut per_split: BTreeMap<String, BTreeMap<String, Vec<MetricSet>>> = BTreeMap::new();
    for (item, pred) in items.iter().zip(predictions) {
        let m = MetricSet::of_sample(pred, item.gt)?;
        per_split
            .entry(item.split.to_string())
            .or_default()
            .entry(item.setting.label())
            .or_default()
            .push(m);
    }
    let mut report = EvalReport { method: method.to_string(), splits: BTreeMap::new() };
    for (split, settings) in per_split {
        let all: Vec<MetricSet> = settings.values().flatten().copied().collect();
        let strata = settings
            .into_iter()
            .map(|(label, ms)| (label, Stratum { count: ms.len(), metrics: MetricSet::mean(&ms) }))
            .collect();
        report.splits.insert(
            split,
            SplitReport { overall: Stratum { count: all.len(), metrics: MetricSet::mean(&all) }, settings: strata },
        );
    }
    Ok(report)
}

impl EvalReport {
    /// Fixed-width table: one block per split, overall row then one row per setting.
    pub fn to_text(&self) -> String {
        let mut out = format!("method: {}\n", self.method);
        for (split, rep) in &self.splits {
            out.push_str(&format!("\n[{split}]\n"));
            out.push_str(&format!(
                "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                "setting", "count", "Dice", "IoU", "MAE", "mDice", "mIoU"
            ));
            let row = |name: &str, s: &Stratum| {
                let m = &s.metrics;
                format!(
                    "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                    name, s.count, m.dice, m.iou, m.mae, m.m_dice, m.m_iou
                )
            };
            out.push_str(&row("all", &rep.overall));
            for (label, s) in &rep.settings {
                out.push_str(&row(label, s));
            }
        }
        out
    }
}
