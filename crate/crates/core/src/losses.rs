//! Contrastive alignment loss on the target feature grid and the edge-weighted
//! segmentation losses on the logit map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};
use crate::numerics::{Graph, Linear, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmptyMaskPolicy {
    /// An empty foreground or background fails the batch.
    #[default]
    Error,
    /// The sample is left out of that term's average.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub contrastive: bool,
    pub edge_lambda: f64,
    /// Odd side of the averaging window used for edge weights.
    pub edge_window: usize,
    pub iou_smooth: f64,
    pub empty_mask: EmptyMaskPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { contrastive: true, edge_lambda: 5.0, edge_window: 7, iou_smooth: 1.0, empty_mask: EmptyMaskPolicy::Error }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edge_lambda < 0.0 || self.edge_window.is_multiple_of(2) || self.iou_smooth < 0.0 {
            return Err(CorError::Input(format!(
                "loss config: lambda {} must be >= 0, window {} odd, smoothing {} >= 0",
                self.edge_lambda, self.edge_window, self.iou_smooth
            )));
        }
        Ok(())
    }
}

/// Learned per-position linear map from target-feature width to prompt width.
#[derive(Clone, Debug)]
pub struct ProjectTarget {
    pub linear: Option<Linear>,
}

impl ProjectTarget {
    pub fn new<R: Rng>(store: &mut ParamStore, c_t: usize, d: usize, enabled: bool, rng: &mut R) -> Result<Self> {
        if !enabled && c_t != d {
            return Err(CorError::dim(format!("projection disabled but widths differ ({c_t} vs {d})")));
        }
        let linear = enabled.then(|| Linear::new(store, "project_target", c_t, d, false, rng));
        Ok(ProjectTarget { linear })
    }

    pub fn forward(&self, g: &mut Graph, f_tar: Var) -> Result<Var> {
        match &self.linear {
            Some(l) => l.forward(g, f_tar),
            None => Ok(f_tar),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Cell is foreground when at least half of its pixels are.
pub fn downsample_mask(mask: &[f64], height: usize, width: usize, grid_h: usize, grid_w: usize) -> Result<Vec<f64>> {
    if mask.len() != height * width || grid_h == 0 || grid_w == 0 || !height.is_multiple_of(grid_h) || !width.is_multiple_of(grid_w) {
        return Err(CorError::dim(format!("cannot pool a {height}x{width} mask onto {grid_h}x{grid_w}")));
    }
    let (sy, sx) = (height / grid_h, width / grid_w);
    let mut out = vec![0.0; grid_h * grid_w];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut on = 0usize;
            for y in gy * sy..(gy + 1) * sy {
                for x in gx * sx..(gx + 1) * sx {
                    on += (mask[y * width + x] > 0.5) as usize;
                }
            }
            out[gy * grid_w + gx] = if 2 * on >= sy * sx { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Zero-padded box average with the full window area as divisor.
pub fn box_average(mask: &[f64], height: usize, width: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let area = (window * window) as f64;
    let mut out = vec![0.0; mask.len()];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let mut s = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(height as i64 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(width as i64 - 1) {
                    s += mask[yy as usize * width + xx as usize];
                }
            }
            out[y as usize * width + x as usize] = s / area;
        }
    }
    out
}

/// `w = 1 + λ·|avgpool(gt) − gt|`
pub fn edge_weights(gt: &[f64], height: usize, width: usize, cfg: &LossConfig) -> Vec<f64> {
    let avg = box_average(gt, height, width, cfg.edge_window);
    avg.iter().zip(gt).map(|(a, g)| 1.0 + cfg.edge_lambda * (a - g).abs()).collect()
}

/// Inputs for the contrastive terms of one sample.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveInput<'a> {
    /// Projected target features `[h, w, d]`.
    pub features: Var,
    /// Ground truth on the feature grid, `h·w` entries.
    pub gt_grid: &'a [f64],
    pub prompt: Var,
}

fn pooled_cosines(
    g: &mut Graph,
    batch: &[ContrastiveInput],
    background: bool,
    policy: EmptyMaskPolicy,
) -> Result<Vec<Var>> {
    let mut cos = Vec::with_capacity(batch.len());
    for s in batch {
        let weights: Vec<f64> =
            s.gt_grid.iter().map(|v| if background { 1.0 - v } else { *v }).collect();
        let pooled = match g.masked_pool(s.features, &weights) {
            Ok(p) => p,
            Err(CorError::EmptyMask(_)) if policy == EmptyMaskPolicy::Skip => continue,
            Err(CorError::EmptyMask(_)) => {
                let which = if background { "background" } else { "foreground" };
                return Err(CorError::EmptyMask(format!("ground truth has no {which} cell on the feature grid")));
            }
            Err(e) => return Err(e),
        };
        cos.push(g.cosine(pooled, s.prompt)?);
    }
    if cos.is_empty() {
        return Err(CorError::EmptyMask("no sample in the batch has a usable mask".into()));
    }
    Ok(cos)
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = g.add(acc, *v)?;
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

/// `1 − mean cos(pool_fg(F), F_avti)`
pub fn loss_fg(g: &mut Graph, batch: &[ContrastiveInput], policy: EmptyMaskPolicy) -> Result<Var> {
    let cos = pooled_cosines(g, batch, false, policy)?;
    let m = mean_of(g, &cos)?;
    g.affine(m, -1.0, 1.0)
}

/// `1 + mean cos(pool_bg(F), F_avti)`
pub fn loss_bg(g: &mut Graph, batch: &[ContrastiveInput], policy: EmptyMaskPolicy) -> Result<Var> {
    let cos = pooled_cosines(g, batch, true, policy)?;
    let m = mean_of(g, &cos)?;
    g.affine(m, 1.0, 1.0)
}

/// Returns `(L_fg, L_bg, L_cor)`.
pub fn loss_cor(g: &mut Graph, batch: &[ContrastiveInput], policy: EmptyMaskPolicy) -> Result<(Var, Var, Var)> {
    let fg = loss_fg(g, batch, policy)?;
    let bg = loss_bg(g, batch, policy)?;
    let cor = g.add(fg, bg)?;
    Ok((fg, bg, cor))
}

fn check_logits(g: &Graph, logits: Var, gt: &[f64]) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] * s[1] != gt.len() {
        return Err(CorError::dim(format!("logits {:?} against {} ground-truth pixels", s, gt.len())));
    }
    Ok((s[0], s[1]))
}

pub fn loss_wbce(g: &mut Graph, logits: Var, gt: &[f64], cfg: &LossConfig) -> Result<Var> {
    let (h, w) = check_logits(g, logits, gt)?;
    let weights = edge_weights(gt, h, w, cfg);
    g.weighted_bce(logits, gt, &weights)
}

pub fn loss_wiou(g: &mut Graph, logits: Var, gt: &[f64], cfg: &LossConfig) -> Result<Var> {
    let (h, w) = check_logits(g, logits, gt)?;
    let weights = edge_weights(gt, h, w, cfg);
    g.weighted_iou(logits, gt, &weights, cfg.iou_smooth)
}

/// Everything the total loss needs from one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossInput<'a> {
    pub contrastive: ContrastiveInput<'a>,
    /// `[H, W]` logits.
    pub logits: Var,
    /// Union ground truth at image resolution.
    pub gt: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_fg: Option<Var>,
    pub l_bg: Option<Var>,
    pub l_cor: Option<Var>,
    pub l_wbce: Var,
    pub l_wiou: Var,
    pub l_seg: Var,
    pub l_total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_fg: Option<f64>,
    pub l_bg: Option<f64>,
    pub l_cor: Option<f64>,
    pub l_wbce: f64,
    pub l_wiou: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            l_fg: self.l_fg.map(v),
            l_bg: self.l_bg.map(v),
            l_cor: self.l_cor.map(v),
            l_wbce: v(self.l_wbce),
            l_wiou: v(self.l_wiou),
            l_seg: v(self.l_seg),
            l_total: v(self.l_total),
        }
    }
}

/// Batch objective: segmentation terms averaged over samples, plus the
/// contrastive pair when enabled.
pub fn loss_total(g: &mut Graph, batch: &[LossInput], cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CorError::Input("empty batch".into()));
    }
    let mut bce = Vec::with_capacity(batch.len());
    let mut iou = Vec::with_capacity(batch.len());
    for s in batch {
        bce.push(loss_wbce(g, s.logits, s.gt, cfg)?);
        iou.push(loss_wiou(g, s.logits, s.gt, cfg)?);
    }
    let l_wbce = mean_of(g, &bce)?;
    let l_wiou = mean_of(g, &iou)?;
    let l_seg = g.add(l_wbce, l_wiou)?;
    if !cfg.contrastive {
        return Ok(LossVars { l_fg: None, l_bg: None, l_cor: None, l_wbce, l_wiou, l_seg, l_total: l_seg });
    }
    let con: Vec<ContrastiveInput> = batch.iter().map(|s| s.contrastive).collect();
    let (fg, bg, cor) = loss_cor(g, &con, cfg.empty_mask)?;
    let l_total = g.add(l_seg, cor)?;
    Ok(LossVars { l_fg: Some(fg), l_bg: Some(bg), l_cor: Some(cor), l_wbce, l_wiou, l_seg, l_total })
}
