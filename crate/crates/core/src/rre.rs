//! Reference region embedding: mask-guided activation maps over the
//! reference features, pooled into one vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};
use crate::numerics::{Conv2d, Conv2dSpec, Graph, LayerNorm, ParamId, ParamStore, Tensor, Var};

pub const SFE_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RreConfig {
    /// Number of activation maps (semantic subspaces).
    pub k: usize,
    pub channels: usize,
}

impl Default for RreConfig {
    fn default() -> Self {
        RreConfig { k: 8, channels: 32 }
    }
}

/// `x + PWC(GeLU(PWC(LN(DWC(x)))))`
#[derive(Clone, Debug)]
pub struct SfeBlock {
    pub dwc: Conv2d,
    pub ln: LayerNorm,
    pub pwc1: Conv2d,
    pub pwc2: Conv2d,
}

impl SfeBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, frozen: bool, rng: &mut R) -> Self {
        let dw = Conv2dSpec { groups: c, stride: 1, padding: 3 };
        SfeBlock {
            dwc: Conv2d::new(store, &format!("{name}.dwc"), c, c, 7, dw, frozen, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), c, frozen),
            pwc1: Conv2d::new(store, &format!("{name}.pwc1"), c, c, 1, Conv2dSpec::dense(1, 0), frozen, rng),
            pwc2: Conv2d::new(store, &format!("{name}.pwc2"), c, c, 1, Conv2dSpec::dense(1, 0), frozen, rng),
        }
    }

    pub fn branch(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.dwc.forward(g, x)?;
        let y = self.ln.forward(g, y)?;
        let y = self.pwc1.forward(g, y)?;
        let y = g.gelu(y)?;
        self.pwc2.forward(g, y)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.branch(g, x)?;
        g.add(x, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.dwc.weight,
            self.dwc.bias,
            self.ln.gamma,
            self.ln.beta,
            self.pwc1.weight,
            self.pwc1.bias,
            self.pwc2.weight,
            self.pwc2.bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Rre {
    pub config: RreConfig,
    pub blocks: Vec<SfeBlock>,
    pub proj: Conv2d,
}

impl Rre {
    pub fn new<R: Rng>(store: &mut ParamStore, config: RreConfig, frozen: bool, rng: &mut R) -> Result<Self> {
        if config.k == 0 || config.channels == 0 {
            return Err(CorError::Input("RRE needs k >= 1 and a positive width".into()));
        }
        let c = config.channels;
        let blocks = (1..=SFE_BLOCKS)
            .map(|i| SfeBlock::new(store, &format!("rre.sfe{i}"), c, frozen, rng))
            .collect();
        let proj = Conv2d::new(store, "rre.proj", c, config.k, 1, Conv2dSpec::dense(1, 0), frozen, rng);
        Ok(Rre { config, blocks, proj })
    }

    /// Raw maps `[h, w, K]` from the elementwise sum of both feature maps.
    pub fn activation_maps(&self, g: &mut Graph, f_ref: Var, f_mask: Var) -> Result<Var> {
        if g.shape(f_ref) != g.shape(f_mask) {
            return Err(CorError::dim(format!(
                "rre: reference {:?} and mask {:?} features differ",
                g.shape(f_ref),
                g.shape(f_mask)
            )));
        }
        let mut x = g.add(f_mask, f_ref)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        self.proj.forward(g, x)
    }

    /// Spatial softmax of every map.
    pub fn normalize_maps(g: &mut Graph, maps: Var) -> Result<Var> {
        g.softmax_positions(maps)
    }

    /// `(1/K) Σ_k Σ_p A[p, k] · F[p, :]`
    pub fn aggregate(g: &mut Graph, f_ref: Var, a_bar: Var) -> Result<Var> {
        let (sf, sa) = (g.shape(f_ref).to_vec(), g.shape(a_bar).to_vec());
        if sf.len() != 3 || sa.len() != 3 || sf[..2] != sa[..2] {
            return Err(CorError::dim(format!("aggregate: features {sf:?}, maps {sa:?}")));
        }
        let p = sf[0] * sf[1];
        let f = g.reshape(f_ref, &[p, sf[2]])?;
        let a = g.reshape(a_bar, &[p, sa[2]])?;
        let at = g.transpose(a)?;
        let per_map = g.matmul(at, f)?;
        g.mean_rows(per_map)
    }

    pub fn forward(&self, g: &mut Graph, f_ref: Var, f_mask: Var) -> Result<Var> {
        let maps = self.activation_maps(g, f_ref, f_mask)?;
        let a_bar = Self::normalize_maps(g, maps)?;
        Self::aggregate(g, f_ref, a_bar)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(SfeBlock::params).collect();
        ids.extend([self.proj.weight, self.proj.bias]);
        ids
    }

    /// Value-level forward: returns (raw maps, normalised maps, F_rre).
    pub fn evaluate(&self, store: &ParamStore, f_ref: &Tensor, f_mask: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::with_params(store);
        let r = g.input(f_ref.clone())?;
        let m = g.input(f_mask.clone())?;
        let maps = self.activation_maps(&mut g, r, m)?;
        let a_bar = Self::normalize_maps(&mut g, maps)?;
        let out = Self::aggregate(&mut g, r, a_bar)?;
        Ok((g.value(maps).clone(), g.value(a_bar).clone(), g.value(out).clone()))
    }
}

/// Masked-pooling substitute used when the region embedding is ablated.
pub fn masked_pool_substitute(g: &mut Graph, f_ref: Var, mask_grid: &[f64]) -> Result<Var> {
    g.masked_pool(f_ref, mask_grid)
}
