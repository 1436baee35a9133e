//! The full retrieval model: encoders, region embedding, fusion, target
//! projection and decoder, with the ablation switches.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avti::{sum_substitute, Avti, ComposedVars};
use crate::backbones::{BackboneConfig, Backbones};
use crate::error::{CorError, Result};
use crate::losses::downsample_mask;
use crate::numerics::{sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rre::{Rre, RreConfig};

/// Which parts of the composed expression reach the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expression {
    #[default]
    Full,
    /// Reference image and mask, no text.
    Irm,
    /// Reference image and text, no mask.
    It,
    /// Reference image only.
    I,
    /// Text only.
    T,
}

impl Expression {
    pub fn uses_image(self) -> bool {
        !matches!(self, Expression::T)
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Expression::Full | Expression::Irm)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Expression::Full | Expression::It | Expression::T)
    }
}

impl FromStr for Expression {
    type Err = CorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Expression::Full),
            "irm" => Ok(Expression::Irm),
            "it" => Ok(Expression::It),
            "i" => Ok(Expression::I),
            "t" => Ok(Expression::T),
            other => Err(CorError::Input(format!("unknown expression {other:?} (irm|it|i|t|full)"))),
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Expression::Full => "full",
            Expression::Irm => "irm",
            Expression::It => "it",
            Expression::I => "i",
            Expression::T => "t",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_rre: bool,
    pub no_avti: bool,
    pub expr: Expression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub k: usize,
    pub project_target: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), k: 8, project_target: true, ablation: Ablation::default(), seed: 42 }
    }
}

/// Raw inputs of one retrieval query.
#[derive(Clone, Debug)]
pub struct QueryInputs {
    /// `[H, W, 3]` in `[-1, 1]`.
    pub target: Tensor,
    pub reference: Tensor,
    /// `[H, W]` binary.
    pub ref_mask: Tensor,
    pub text: String,
}

/// Outputs of the frozen encoders, computed once per sample.
#[derive(Clone, Debug)]
pub struct FrozenFeatures {
    pub f_tar: Tensor,
    pub f_ref: Tensor,
    pub f_txt: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub f_tar_proj: Var,
    pub f_rre: Var,
    pub composed: Option<ComposedVars>,
    pub f_avti: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct CoreModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbones: Backbones,
    pub rre: Rre,
    pub avti: Avti,
    pub project: crate::losses::ProjectTarget,
}

impl CoreModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbones = Backbones::new(&mut store, &config.backbone, &mut rng)?;
        let c = config.backbone.channels;
        let rre = Rre::new(&mut store, RreConfig { k: config.k, channels: c }, false, &mut rng)?;
        let avti = Avti::new(&mut store, c, false, &mut rng);
        let project = crate::losses::ProjectTarget::new(&mut store, c, c, config.project_target, &mut rng)?;
        Ok(CoreModel { config, store, backbones, rre, avti, project })
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.frozen).map(|(id, _)| id).collect()
    }

    /// Runs the frozen encoders (those whose flags are set) outside any graph.
    pub fn precompute(&self, inputs: &QueryInputs) -> Result<FrozenFeatures> {
        let s = &self.store;
        Ok(FrozenFeatures {
            f_tar: self.backbones.encode_target(s, &inputs.target)?,
            f_ref: self.backbones.encode_reference(s, &inputs.reference)?,
            f_txt: self.backbones.encode_text(s, &inputs.text)?,
        })
    }

    fn encoder_var(
        &self,
        g: &mut Graph,
        frozen: bool,
        cached: Option<&Tensor>,
        run: impl FnOnce(&mut Graph) -> Result<Var>,
    ) -> Result<Var> {
        match cached {
            Some(t) if frozen => g.input(t.clone()),
            _ => run(g),
        }
    }

    /// Builds the forward graph for one query.
    pub fn forward(&self, g: &mut Graph, inputs: &QueryInputs, cache: Option<&FrozenFeatures>) -> Result<ForwardVars> {
        let bc = &self.config.backbone;
        let ab = self.config.ablation;
        let bb = &self.backbones;

        let f_tar = self.encoder_var(g, bc.freeze_image, cache.map(|c| &c.f_tar), |g| {
            let x = g.input(inputs.target.clone())?;
            bb.target.forward(g, x)
        })?;
        let mut f_ref = self.encoder_var(g, bc.freeze_image, cache.map(|c| &c.f_ref), |g| {
            let x = g.input(inputs.reference.clone())?;
            bb.reference.forward(g, x)
        })?;
        if !ab.expr.uses_image() {
            f_ref = g.input(Tensor::zeros(g.shape(f_ref)))?;
        }

        let f_rre = if !ab.expr.uses_mask() {
            let p = g.shape(f_ref)[0] * g.shape(f_ref)[1];
            g.masked_pool(f_ref, &vec![1.0; p])?
        } else if ab.no_rre {
            let grid = bc.reference_grid;
            let weights = downsample_mask(inputs.ref_mask.data(), bc.image_size, bc.image_size, grid, grid)?;
            let weights = if weights.iter().any(|w| *w > 0.0) { weights } else { coverage(&inputs.ref_mask, bc)? };
            g.masked_pool(f_ref, &weights)?
        } else {
            let m = g.input(inputs.ref_mask.clone())?;
            let f_mask = bb.mask.forward(g, m)?;
            self.rre.forward(g, f_ref, f_mask)?
        };

        let (composed, f_avti) = if !ab.expr.uses_text() {
            (None, f_rre)
        } else {
            let f_txt = self.encoder_var(g, bc.freeze_text, cache.map(|c| &c.f_txt), |g| bb.text.forward(g, &inputs.text))?;
            if ab.no_avti {
                (None, sum_substitute(g, f_rre, f_txt)?)
            } else {
                let c = self.avti.compose(g, f_rre, f_txt)?;
                (Some(c), c.f_avti)
            }
        };

        let f_tar_proj = self.project.forward(g, f_tar)?;
        let logits = bb.decoder.forward(g, f_tar, f_avti)?;
        Ok(ForwardVars { f_tar_proj, f_rre, composed, f_avti, logits })
    }

    /// Foreground probability map `[H, W]`.
    pub fn predict(&self, inputs: &QueryInputs, cache: Option<&FrozenFeatures>) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, inputs, cache)?;
        let z = g.value(out.logits);
        Tensor::new(z.shape(), z.data().iter().map(|v| sigmoid(*v)).collect())
    }
}

/// Fraction of each reference-grid cell covered by the mask; used when a
/// small mask vanishes under the half-coverage rule.
fn coverage(mask: &Tensor, bc: &BackboneConfig) -> Result<Vec<f64>> {
    let (n, grid) = (bc.image_size, bc.reference_grid);
    let s = n / grid;
    let mut out = vec![0.0; grid * grid];
    for y in 0..n {
        for x in 0..n {
            out[(y / s) * grid + x / s] += mask.data()[y * n + x];
        }
    }
    if out.iter().all(|v| *v == 0.0) {
        return Err(CorError::EmptyMask("reference mask is empty".into()));
    }
    Ok(out)
}
