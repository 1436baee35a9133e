//! Gated, alpha-weighted fusion of the region embedding and the text embedding.

use rand::Rng;

use crate::error::{CorError, Result};
use crate::numerics::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

/// `Linear → ReLU → Linear`
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], frozen: bool, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], frozen, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], frozen, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

/// Graph handles of one composition.
#[derive(Clone, Copy, Debug)]
pub struct ComposedVars {
    pub f_rre: Var,
    pub f_txt: Var,
    pub attn_v: Var,
    pub attn_t: Var,
    pub alpha: Var,
    pub f_avti: Var,
}

#[derive(Clone, Debug)]
pub struct ComposedEmbedding {
    pub f_rre: Tensor,
    pub f_txt: Tensor,
    pub attn_v: Tensor,
    pub attn_t: Tensor,
    pub alpha: f64,
    pub f_avti: Tensor,
}

impl ComposedEmbedding {
    pub fn from_graph(g: &Graph, v: &ComposedVars) -> Self {
        ComposedEmbedding {
            f_rre: g.value(v.f_rre).clone(),
            f_txt: g.value(v.f_txt).clone(),
            attn_v: g.value(v.attn_v).clone(),
            attn_t: g.value(v.attn_t).clone(),
            alpha: g.value(v.alpha).data()[0],
            f_avti: g.value(v.f_avti).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Avti {
    pub dim: usize,
    pub gate_v: Mlp,
    pub gate_t: Mlp,
    pub alpha: Mlp,
}

impl Avti {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, frozen: bool, rng: &mut R) -> Self {
        Avti {
            dim: d,
            gate_v: Mlp::new(store, "avti.gate_v", [2 * d, d, d], frozen, rng),
            gate_t: Mlp::new(store, "avti.gate_t", [2 * d, d, d], frozen, rng),
            alpha: Mlp::new(store, "avti.alpha", [2 * d, d, 1], frozen, rng),
        }
    }

    fn check(&self, g: &Graph, a: Var, b: Var) -> Result<()> {
        if g.shape(a) != [self.dim] || g.shape(b) != [self.dim] {
            return Err(CorError::dim(format!(
                "avti expects two [{}] vectors, got {:?} and {:?}",
                self.dim,
                g.shape(a),
                g.shape(b)
            )));
        }
        Ok(())
    }

    pub fn modality_gates(&self, g: &mut Graph, f_rre: Var, f_txt: Var) -> Result<(Var, Var)> {
        self.check(g, f_rre, f_txt)?;
        let comb = g.concat_last(&[f_rre, f_txt])?;
        let v = self.gate_v.forward(g, comb)?;
        let t = self.gate_t.forward(g, comb)?;
        Ok((g.sigmoid(v)?, g.sigmoid(t)?))
    }

    /// Scalar weight from the two gated vectors, as a one-element tensor.
    pub fn fusion_weight(&self, g: &mut Graph, gated_v: Var, gated_t: Var) -> Result<Var> {
        self.check(g, gated_v, gated_t)?;
        let comb = g.concat_last(&[gated_v, gated_t])?;
        let a = self.alpha.forward(g, comb)?;
        g.sigmoid(a)
    }

    pub fn compose(&self, g: &mut Graph, f_rre: Var, f_txt: Var) -> Result<ComposedVars> {
        let (attn_v, attn_t) = self.modality_gates(g, f_rre, f_txt)?;
        let gated_v = g.mul(attn_v, f_rre)?;
        let gated_t = g.mul(attn_t, f_txt)?;
        let alpha = self.fusion_weight(g, gated_v, gated_t)?;
        let one_minus = g.affine(alpha, -1.0, 1.0)?;
        let a = g.mul_scalar(alpha, gated_v)?;
        let b = g.mul_scalar(one_minus, gated_t)?;
        let f_avti = g.add(a, b)?;
        Ok(ComposedVars { f_rre, f_txt, attn_v, attn_t, alpha, f_avti })
    }

    pub fn evaluate(&self, store: &ParamStore, f_rre: &Tensor, f_txt: &Tensor) -> Result<ComposedEmbedding> {
        let mut g = Graph::with_params(store);
        let r = g.input(f_rre.clone())?;
        let t = g.input(f_txt.clone())?;
        let vars = self.compose(&mut g, r, t)?;
        Ok(ComposedEmbedding::from_graph(&g, &vars))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.gate_v, &self.gate_t, &self.alpha].iter().flat_map(|m| m.params()).collect()
    }
}

/// Sum substitute used when the fusion module is ablated.
pub fn sum_substitute(g: &mut Graph, f_rre: Var, f_txt: Var) -> Result<Var> {
    g.add(f_rre, f_txt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::zero_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_init_gives_quarter_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let avti = Avti::new(&mut store, 3, false, &mut rng);
        zero_params(&mut store, &avti.params());
        let r = Tensor::vector(vec![1.0, -2.0, 4.0]);
        let t = Tensor::vector(vec![0.5, 8.0, -1.0]);
        let c = avti.evaluate(&store, &r, &t).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert!(c.attn_v.data().iter().chain(c.attn_t.data()).all(|v| *v == 0.5));
        let expect: Vec<f64> = r.data().iter().zip(t.data()).map(|(a, b)| 0.25 * (a + b)).collect();
        assert_eq!(c.f_avti.data(), expect.as_slice());
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let avti = Avti::new(&mut store, 3, false, &mut rng);
        let res = avti.evaluate(&store, &Tensor::zeros(&[3]), &Tensor::zeros(&[4]));
        assert!(matches!(res, Err(CorError::Dimension(_))));
    }
}
