//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each node
//! keeps its value; [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar with respect to every node that needs one. Feature maps
//! use channel-last `[h, w, c]` layout throughout.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{CorError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Gelu,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn dense(stride: usize, padding: usize) -> Self {
        Conv2dSpec { groups: 1, stride, padding }
    }
}

/// Every differentiable operation the graph records.
pub const DIFFERENTIABLE_OPS: [&str; 21] = [
    "add",
    "sub",
    "mul",
    "affine",
    "mul_scalar",
    "sum",
    "reshape",
    "concat_last",
    "matmul",
    "transpose",
    "mean_rows",
    "linear",
    "conv2d",
    "layer_norm",
    "activation",
    "softmax_positions",
    "masked_pool",
    "cosine",
    "upsample_bilinear",
    "weighted_bce",
    "weighted_iou",
];

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MulScalar { scalar: Var, x: Var },
    Sum(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    MeanRows(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, spec: Conv2dSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Activation(Var, ActivationKind),
    SoftmaxPositions(Var),
    MaskedPool { x: Var, weights: Vec<f64>, total: f64 },
    Cosine(Var, Var),
    Upsample(Var),
    WeightedBce { logits: Var, coef: Vec<f64> },
    WeightedIou { logits: Var, target: Vec<f64>, weights: Vec<f64>, smooth: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_deref().map(|g| (*id, g)))
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source index pairs and blend weight for one output coordinate of a
/// half-pixel-centred bilinear resize.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k || stride == 0 {
        return Err(CorError::dim(format!("kernel {k} does not fit input {len} with padding {pad}")));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph { store: None, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(CorError::NonFinite(what));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false, "input")
    }

    /// Leaf whose gradient is tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs, "leaf")
    }

    /// Binds a stored parameter as a leaf (once per graph).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| CorError::Input("graph has no parameter store".into()))?;
        let p = store.get(id);
        let t = p.tensor.clone().with_requires_grad(!p.frozen);
        let v = self.leaf(t)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CorError::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let n = self.needs(&[a, b]);
        self.push(t, Op::Add(a, b), n, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let n = self.needs(&[a, b]);
        self.push(t, Op::Sub(a, b), n, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let n = self.needs(&[a, b]);
        self.push(t, Op::Mul(a, b), n, "mul")
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|v| scale * v + shift).collect())?;
        let n = self.needs(&[x]);
        self.push(t, Op::Affine(x, scale), n, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Multiplies every entry of `x` by the one-element tensor `scalar`.
    pub fn mul_scalar(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(CorError::dim(format!("mul_scalar: {:?} is not a scalar", self.shape(scalar))));
        }
        let s = self.data(scalar)[0];
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|v| s * v).collect())?;
        let n = self.needs(&[scalar, x]);
        self.push(t, Op::MulScalar { scalar, x }, n, "mul_scalar")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let n = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), n, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let count = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / count)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let n = self.needs(&[x]);
        self.push(t, Op::Reshape(x), n, "reshape")
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| CorError::dim("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(CorError::dim(format!("concat: {:?} does not match leading {:?}", s, lead)));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = self.value(*p).channels();
                data.extend_from_slice(&self.data(*p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let n = self.needs(parts);
        self.push(Tensor::new(&shape, data)?, Op::ConcatLast(parts.to_vec()), n, "concat")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CorError::dim(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
            }
        }
        let nd = self.needs(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), nd, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CorError::dim(format!("transpose expects 2-D, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let nd = self.needs(&[x]);
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), nd, "transpose")
    }

    /// Mean over the first axis of a `[m, n]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(CorError::dim(format!("mean_rows expects non-empty 2-D, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            out.iter_mut().zip(&d[i * n..(i + 1) * n]).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let nd = self.needs(&[x]);
        self.push(Tensor::vector(out), Op::MeanRows(x), nd, "mean_rows")
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w), self.shape(b));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) || sb != [sw[1]] {
            return Err(CorError::dim(format!("linear: x {:?}, W {:?}, b {:?}", sx, sw, sb)));
        }
        let (m, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / m;
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let mut row = db.to_vec();
            for k in 0..m {
                let xv = dx[r * m + k];
                if xv == 0.0 {
                    continue;
                }
                row.iter_mut().zip(&dw[k * n..(k + 1) * n]).for_each(|(o, wv)| *o += xv * wv);
            }
            out.extend(row);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let nd = self.needs(&[x, w, b]);
        self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, nd, "linear")
    }

    /// Cross-correlation over a `[h, w, c_in]` map with weight
    /// `[kh, kw, c_in / groups, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 {
            return Err(CorError::dim(format!("conv2d: input {:?}, weight {:?}", sx, sw)));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cin_g, cout) = (sw[0], sw[1], sw[2], sw[3]);
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g || sb != [cout] {
            return Err(CorError::dim(format!(
                "conv2d: {cin} input / {cout} output channels with {g} groups, weight {:?}, bias {:?}",
                sw, sb
            )));
        }
        let oh = conv_out(h, kh, spec.stride, spec.padding)?;
        let ow = conv_out(wd, kw, spec.stride, spec.padding)?;
        let cout_g = cout / g;
        let (dx, dwt, dbias) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                o.copy_from_slice(dbias);
                for ky in 0..kh {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xin = &dx[(iy as usize * wd + ix as usize) * cin..][..cin];
                        let wk = &dwt[(ky * kw + kx) * cin_g * cout..][..cin_g * cout];
                        if cin_g == 1 && cout_g == 1 {
                            o.iter_mut().zip(xin).zip(wk).for_each(|((o, x), w)| *o += x * w);
                            continue;
                        }
                        for grp in 0..g {
                            let og = &mut o[grp * cout_g..(grp + 1) * cout_g];
                            for ci in 0..cin_g {
                                let xv = xin[grp * cin_g + ci];
                                let wrow = &wk[ci * cout + grp * cout_g..][..cout_g];
                                og.iter_mut().zip(wrow).for_each(|(o, w)| *o += xv * w);
                            }
                        }
                    }
                }
            }
        }
        let nd = self.needs(&[x, w, b]);
        self.push(Tensor::new(&[oh, ow, cout], out)?, Op::Conv2d { x, w, b, spec }, nd, "conv2d")
    }

    /// Normalises each position over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).channels();
        if c < 1 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CorError::dim(format!(
                "layer_norm: {} channels, gamma {:?}, beta {:?}",
                c,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / c;
        let (dx, dg, db) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; rows * c];
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &dx[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..c {
                let xh = (row[k] - mean) * rs;
                xhat[r * c + k] = xh;
                out[r * c + k] = xh * dg[k] + db[k];
            }
        }
        let shape = self.shape(x).to_vec();
        let nd = self.needs(&[x, gamma, beta]);
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, nd, "layer_norm")
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            ActivationKind::Gelu => gelu,
            ActivationKind::Relu => |v| v.max(0.0),
            ActivationKind::Sigmoid => sigmoid,
        };
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|v| f(*v)).collect())?;
        let nd = self.needs(&[x]);
        self.push(t, Op::Activation(x, kind), nd, "activation")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Sigmoid)
    }

    /// Softmax over every position, independently for each slice of the last
    /// axis. A 2-D `[h, w]` map is treated as a single slice.
    pub fn softmax_positions(&mut self, x: Var) -> Result<Var> {
        let k = if self.shape(x).len() >= 3 { self.value(x).channels() } else { 1 };
        let src = self.value(x);
        let p = src.numel() / k;
        let d = src.data();
        let mut out = vec![0.0; d.len()];
        for ch in 0..k {
            let max = (0..p).map(|i| d[i * k + ch]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..p {
                let e = (d[i * k + ch] - max).exp();
                out[i * k + ch] = e;
                total += e;
            }
            for i in 0..p {
                out[i * k + ch] /= total;
            }
        }
        let t = Tensor::new(src.shape(), out)?;
        let nd = self.needs(&[x]);
        self.push(t, Op::SoftmaxPositions(x), nd, "softmax_positions")
    }

    /// Weighted spatial average of a `[h, w, c]` map; `weights` holds one
    /// non-negative entry per position.
    pub fn masked_pool(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || weights.len() != s[0] * s[1] {
            return Err(CorError::dim(format!("masked_pool: map {:?}, mask of {} entries", s, weights.len())));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(CorError::EmptyMask("pooling mask selects no position".into()));
        }
        let c = s[2];
        let d = self.data(x);
        let mut out = vec![0.0; c];
        for (p, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                out.iter_mut().zip(&d[p * c..(p + 1) * c]).for_each(|(o, v)| *o += w * v);
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        let nd = self.needs(&[x]);
        let op = Op::MaskedPool { x, weights: weights.to_vec(), total };
        self.push(Tensor::vector(out), op, nd, "masked_pool")
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (da, db) = (self.data(a), self.data(b));
        let na = da.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = db.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(CorError::DegenerateVector("cosine similarity of a zero-norm vector".into()));
        }
        let dot: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
        let nd = self.needs(&[a, b]);
        self.push(Tensor::scalar(dot / (na * nb)), Op::Cosine(a, b), nd, "cosine")
    }

    /// Half-pixel bilinear resize of a `[h, w, c]` map to `[out_h, out_w, c]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] == 0 || s[1] == 0 {
            return Err(CorError::dim(format!("upsample expects [h, w, c], got {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ay, ax) = (bilinear_axis(h, out_h), bilinear_axis(w, out_w));
        let d = self.data(x);
        let mut out = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ay.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in ax.iter().enumerate() {
                for ch in 0..c {
                    let v = |yy: usize, xx: usize| d[(yy * w + xx) * c + ch];
                    out[(oy * out_w + ox) * c + ch] = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                        + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                }
            }
        }
        let nd = self.needs(&[x]);
        self.push(Tensor::new(&[out_h, out_w, c], out)?, Op::Upsample(x), nd, "upsample")
    }

    /// `Σ w·BCE(σ(z), g) / Σ w` over all entries.
    pub fn weighted_bce(&mut self, logits: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if target.len() != z.len() || weights.len() != z.len() {
            return Err(CorError::dim(format!(
                "weighted_bce: {} logits, {} targets, {} weights",
                z.len(),
                target.len(),
                weights.len()
            )));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(CorError::Input("weighted_bce: weights sum to zero".into()));
        }
        let mut loss = 0.0;
        let mut coef = Vec::with_capacity(z.len());
        for ((zv, g), w) in z.iter().zip(target).zip(weights) {
            let bce = zv.max(0.0) - zv * g + (-zv.abs()).exp().ln_1p();
            loss += w * bce;
            coef.push(w * (sigmoid(*zv) - g) / wsum);
        }
        let nd = self.needs(&[logits]);
        self.push(Tensor::scalar(loss / wsum), Op::WeightedBce { logits, coef }, nd, "weighted_bce")
    }

    /// `1 − (Σ w·p·g + s) / (Σ w·(p + g − p·g) + s)` with `p = σ(z)`.
    pub fn weighted_iou(&mut self, logits: Var, target: &[f64], weights: &[f64], smooth: f64) -> Result<Var> {
        let z = self.data(logits);
        if target.len() != z.len() || weights.len() != z.len() {
            return Err(CorError::dim(format!(
                "weighted_iou: {} logits, {} targets, {} weights",
                z.len(),
                target.len(),
                weights.len()
            )));
        }
        let (mut inter, mut union) = (0.0, 0.0);
        for ((zv, g), w) in z.iter().zip(target).zip(weights) {
            let p = sigmoid(*zv);
            inter += w * p * g;
            union += w * (p + g - p * g);
        }
        if union + smooth <= 0.0 {
            return Err(CorError::Input("weighted_iou: empty union with zero smoothing".into()));
        }
        let loss = 1.0 - (inter + smooth) / (union + smooth);
        let nd = self.needs(&[logits]);
        let op = Op::WeightedIou { logits, target: target.to_vec(), weights: weights.to_vec(), smooth };
        self.push(Tensor::scalar(loss), op, nd, "weighted_iou")
    }

    /// Reverse pass from a one-element `loss`. Gradients are also added into
    /// the grad slot of every leaf tensor that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(CorError::dim(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                if let Some(g) = g {
                    node.value.accumulate_grad(g)?;
                }
            }
        }
        let params = self.bound.iter().map(|(id, v)| (*id, *v)).collect::<Vec<_>>();
        let mut params = params;
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let y = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| g.iter_mut().zip(gy).zip(vb).for_each(|((o, d), x)| *o += d * x));
                acc(*b, &mut |g| g.iter_mut().zip(gy).zip(va).for_each(|((o, d), x)| *o += d * x));
            }
            Op::Affine(x, s) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += s * d));
            }
            Op::MulScalar { scalar, x } => {
                let s = val(*scalar)[0];
                let vx = val(*x);
                let ds: f64 = gy.iter().zip(vx).map(|(d, v)| d * v).sum();
                acc(*scalar, &mut |g| g[0] += ds);
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += s * d));
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += gy[0]));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o += d));
            }
            Op::ConcatLast(parts) => {
                let total = nodes[i].value.channels();
                let rows = gy.len() / total;
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.channels();
                    acc(*p, &mut |g| {
                        for r in 0..rows {
                            for k in 0..c {
                                g[r * c + k] += gy[r * total + offset + k];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gy[r * n + j] * vb[p * n + j];
                            }
                            g[r * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = va[r * k + p];
                            for j in 0..n {
                                g[p * n + j] += av * gy[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                acc(*x, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += gy[j * m + r];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (shape(*x)[0], shape(*x)[1]);
                acc(*x, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += gy[j] / m as f64;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, n) = (shape(*w)[0], shape(*w)[1]);
                let rows = gy.len() / n;
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        for k in 0..m {
                            let wrow = &vw[k * n..(k + 1) * n];
                            g[r * m + k] += wrow.iter().zip(&gy[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for r in 0..rows {
                        for k in 0..m {
                            let xv = vx[r * m + k];
                            if xv == 0.0 {
                                continue;
                            }
                            g[k * n..(k + 1) * n].iter_mut().zip(&gy[r * n..(r + 1) * n]).for_each(|(o, d)| *o += xv * d);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for r in 0..rows {
                        g.iter_mut().zip(&gy[r * n..(r + 1) * n]).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => {
                let (h, wd, cin) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let (kh, kw, cin_g, cout) = (shape(*w)[0], shape(*w)[1], shape(*w)[2], shape(*w)[3]);
                let (oh, ow) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                let cout_g = cout / spec.groups;
                let (vx, vw) = (val(*x), val(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ky in 0..kh {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    f(oy * ow + ox, iy as usize * wd + ix as usize, ky, kx);
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |g| {
                    taps(&mut |op, ip, ky, kx| {
                        let wk = &vw[(ky * kw + kx) * cin_g * cout..][..cin_g * cout];
                        let go = &gy[op * cout..(op + 1) * cout];
                        let gx = &mut g[ip * cin..(ip + 1) * cin];
                        if cin_g == 1 && cout_g == 1 {
                            gx.iter_mut().zip(go).zip(wk).for_each(|((o, d), w)| *o += d * w);
                            return;
                        }
                        for grp in 0..spec.groups {
                            let gog = &go[grp * cout_g..(grp + 1) * cout_g];
                            for ci in 0..cin_g {
                                let wrow = &wk[ci * cout + grp * cout_g..][..cout_g];
                                gx[grp * cin_g + ci] += gog.iter().zip(wrow).map(|(d, w)| d * w).sum::<f64>();
                            }
                        }
                    })
                });
                acc(*w, &mut |g| {
                    taps(&mut |op, ip, ky, kx| {
                        let wk = &mut g[(ky * kw + kx) * cin_g * cout..][..cin_g * cout];
                        let go = &gy[op * cout..(op + 1) * cout];
                        let xin = &vx[ip * cin..(ip + 1) * cin];
                        if cin_g == 1 && cout_g == 1 {
                            wk.iter_mut().zip(go).zip(xin).for_each(|((o, d), x)| *o += d * x);
                            return;
                        }
                        for grp in 0..spec.groups {
                            let gog = &go[grp * cout_g..(grp + 1) * cout_g];
                            for ci in 0..cin_g {
                                let xv = xin[grp * cin_g + ci];
                                let wrow = &mut wk[ci * cout + grp * cout_g..][..cout_g];
                                wrow.iter_mut().zip(gog).for_each(|(w, d)| *w += xv * d);
                            }
                        }
                    })
                });
                acc(*b, &mut |g| {
                    for p in 0..oh * ow {
                        g.iter_mut().zip(&gy[p * cout..(p + 1) * cout]).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = nodes[i].value.channels();
                let rows = gy.len() / c;
                let vg = val(*gamma);
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        let dxh: Vec<f64> = (0..c).map(|k| gy[r * c + k] * vg[k]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxh.iter().zip(&xhat[r * c..(r + 1) * c]).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for k in 0..c {
                            g[r * c + k] += rstd[r] * (dxh[k] - mean_d - xhat[r * c + k] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for r in 0..rows {
                        for k in 0..c {
                            g[k] += gy[r * c + k] * xhat[r * c + k];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for r in 0..rows {
                        for k in 0..c {
                            g[k] += gy[r * c + k];
                        }
                    }
                });
            }
            Op::Activation(x, kind) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for j in 0..g.len() {
                        let d = match kind {
                            ActivationKind::Gelu => gelu_grad(vx[j]),
                            ActivationKind::Relu => {
                                if vx[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ActivationKind::Sigmoid => y[j] * (1.0 - y[j]),
                        };
                        g[j] += gy[j] * d;
                    }
                });
            }
            Op::SoftmaxPositions(x) => {
                let k = if shape(*x).len() >= 3 { nodes[i].value.channels() } else { 1 };
                let p = y.len() / k;
                acc(*x, &mut |g| {
                    for ch in 0..k {
                        let dot: f64 = (0..p).map(|q| y[q * k + ch] * gy[q * k + ch]).sum();
                        for q in 0..p {
                            g[q * k + ch] += y[q * k + ch] * (gy[q * k + ch] - dot);
                        }
                    }
                });
            }
            Op::MaskedPool { x, weights, total } => {
                let c = gy.len();
                acc(*x, &mut |g| {
                    for (p, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            for k in 0..c {
                                g[p * c + k] += w * gy[k] / total;
                            }
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = y[0];
                acc(*a, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += gy[0] * (vb[j] / (na * nb) - cos * va[j] / (na * na));
                    }
                });
                acc(*b, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += gy[0] * (va[j] / (na * nb) - cos * vb[j] / (nb * nb));
                    }
                });
            }
            Op::Upsample(x) => {
                let (h, w, c) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let (out_h, out_w) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                let (ay, ax) = (bilinear_axis(h, out_h), bilinear_axis(w, out_w));
                acc(*x, &mut |g| {
                    for (oy, &(y0, y1, fy)) in ay.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in ax.iter().enumerate() {
                            for ch in 0..c {
                                let d = gy[(oy * out_w + ox) * c + ch];
                                g[(y0 * w + x0) * c + ch] += d * (1.0 - fy) * (1.0 - fx);
                                g[(y0 * w + x1) * c + ch] += d * (1.0 - fy) * fx;
                                g[(y1 * w + x0) * c + ch] += d * fy * (1.0 - fx);
                                g[(y1 * w + x1) * c + ch] += d * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::WeightedBce { logits, coef } => {
                acc(*logits, &mut |g| g.iter_mut().zip(coef).for_each(|(o, k)| *o += gy[0] * k));
            }
            Op::WeightedIou { logits, target, weights, smooth } => {
                let z = val(*logits);
                let (mut inter, mut union) = (0.0, 0.0);
                let p: Vec<f64> = z.iter().map(|v| sigmoid(*v)).collect();
                for j in 0..z.len() {
                    inter += weights[j] * p[j] * target[j];
                    union += weights[j] * (p[j] + target[j] - p[j] * target[j]);
                }
                let (num, den) = (inter + smooth, union + smooth);
                acc(*logits, &mut |g| {
                    for j in 0..g.len() {
                        let dinter = weights[j] * target[j];
                        let dunion = weights[j] * (1.0 - target[j]);
                        let dl_dp = -(dinter * den - num * dunion) / (den * den);
                        g[j] += gy[0] * dl_dp * p[j] * (1.0 - p[j]);
                    }
                });
            }
        }
    }
}
