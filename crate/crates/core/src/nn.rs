//! Parameter storage and the layers every network here is built from.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<E = f32> {
    params: IndexMap<String, Tensor<E>>,
}

/// Graph handles for every tensor of a [`ParamStore`], same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        let (idx, prev) = self.params.insert_full(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        ParamId(idx)
    }

    pub fn normal(&mut self, name: impl Into<String>, dims: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        self.add(name, Tensor::new(dims, data).expect("positive dims"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(dims))
    }

    pub fn ones(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::full(dims, E::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.get(name)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<E>> {
        self.params.values_mut()
    }

    /// Insert every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Bound {
        Bound {
            vars: self.params.values().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Bind every tensor as a slice of one flat `[1, numel]` variable, so a
    /// whole model can be differentiated as a single input.
    pub fn bind_flat(&self, g: &mut Graph<E>, flat: Var) -> Result<Bound> {
        if g.dims(flat) != [1, self.numel()] {
            return Err(Error::shape(
                "bind_flat",
                format!("{:?} for {} params", g.dims(flat), self.numel()),
            ));
        }
        let mut off = 0;
        let mut vars = Vec::with_capacity(self.params.len());
        for t in self.params.values() {
            let s = g.slice_cols(flat, off, t.len())?;
            vars.push(g.reshape(s, t.dims())?);
            off += t.len();
        }
        Ok(Bound { vars })
    }

    /// Gradients for every tensor, zero where the backward pass did not reach.
    pub fn grads(&self, g: &Graph<E>, bound: &Bound) -> Vec<Tensor<E>> {
        self.params
            .values()
            .zip(&bound.vars)
            .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
            .collect()
    }

    pub fn flatten(&self) -> Vec<E> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[E]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "load_flat",
                format!("{} values for {} params", flat.len(), self.numel()),
            ));
        }
        let mut off = 0;
        for t in self.params.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Replace a tensor by name, keeping its dims.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.dims() != value.dims() {
            return Err(Error::shape(
                "set",
                format!("{name}: {:?} vs {:?}", slot.dims(), value.dims()),
            ));
        }
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// All-zero weight and bias.
    pub fn zeroed<E: Element>(store: &mut ParamStore<E>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: Some(store.zeros(format!("{name}.bias"), &[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same var twice).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, xq, xkv, xkv, causal)?.0)
    }

    /// Attention with distinct key and value inputs.
    pub fn forward_qkv<E: Element>(&self, g: &mut Graph<E>, p: &Bound, xq: Var, xk: Var, xv: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, xq, xk, xv, false)?.0)
    }

    /// Returns the output and the per-head attention matrices.
    pub fn forward_with_weights<E: Element>(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        xq: Var,
        xk: Var,
        xv: Var,
        causal: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(g, p, xq)?;
        let k = self.key.forward(g, p, xk)?;
        let v = self.value.forward(g, p, xv)?;
        let hd = self.dim / self.heads;
        let scale = E::from_f64(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = if causal { g.causal_softmax(s)? } else { g.softmax(s)? };
            outs.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if self.heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((self.out.forward(g, p, cat)?, weights))
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng),
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, h, causal)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, p, x)?;
        let h = self.ffn.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// A stack of transformer blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
}

impl Transformer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim),
        })
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, mut x: Var, causal: bool) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, p, x, causal)?;
        }
        self.ln_out.forward(g, p, x)
    }
}

/// Sinusoidal features of a scalar in `[0, 1]`; `dim` must be even.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Fixed 2-D sinusoidal position codes, one row per grid cell in row-major order.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Vec<Vec<f64>> {
    let quarter = dim / 4;
    let mut table = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut v = vec![0.0; dim];
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                v[i] = (r as f64 * freq).sin();
                v[quarter + i] = (r as f64 * freq).cos();
                v[2 * quarter + i] = (c as f64 * freq).sin();
                v[3 * quarter + i] = (c as f64 * freq).cos();
            }
            table.push(v);
        }
    }
    table
}

pub(crate) fn table_tensor<E: Element>(rows: &[Vec<f64>]) -> Tensor<E> {
    let cols = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), cols], &flat).expect("non-empty table")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::from_f64(&[1, 8], &[0.3, -1.0, 2.0, 0.5, 0.0, 1.5, -0.7, 0.2]).unwrap());
        let (_, w) = attn.forward_with_weights(&mut g, &p, x, x, x, false).unwrap();
        for a in w {
            assert_eq!(g.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let flat = store.flatten();
        let mut other = store.clone();
        other.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        other.load_flat(&flat).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(0.0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
