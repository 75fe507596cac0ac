//! Image → discrete tokens expressed in a fixed vocabulary embedding space.
//!
//! The path is: strided convolutional encoder → latent grid → `n` learned
//! queries cross-attending to the flattened grid → per-token logits over the
//! vocabulary → Gumbel-softmax weights `alpha` → `v = alpha · L` → nearest
//! code in an EMA-maintained codebook.

use rand::{seq::index::sample, Rng};

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::nn::{sincos_2d, table_tensor, Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Element, Tensor};

/// Frozen `N_l x d_l` vocabulary embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabTable<E = f32> {
    table: Tensor<E>,
}

impl<E: Element> VocabTable<E> {
    /// Seeded random table with unit-norm rows.
    pub fn random(items: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut data = Vec::with_capacity(items * dim);
        for _ in 0..items {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.iter().map(|v| E::from_f64(v / norm)));
        }
        Self::from_tensor(Tensor::new(&[items, dim], data)?)
    }

    pub fn from_tensor(table: Tensor<E>) -> Result<Self> {
        table.as_matrix("vocab_table")?;
        if !table.is_finite() {
            return Err(Error::NonFinite { op: "vocab_table" });
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Tensor<E> {
        &self.table
    }

    pub fn items(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    pub fn cast<F: Element>(&self) -> VocabTable<F> {
        VocabTable {
            table: self.table.cast(),
        }
    }
}

/// `h x w x d_v` latent grid, flattened row-major to `[h*w, d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<E = f32> {
    pub height: usize,
    pub width: usize,
    pub grid: Tensor<E>,
}

/// One stride-2 stage: 3x3 convolution → layer norm over channels → GELU.
#[derive(Debug, Clone)]
struct ConvStage {
    conv: Linear,
    norm: LayerNorm,
    geom: ConvGeom,
}

/// Strided convolutional downsampler producing the latent grid.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    stages: Vec<ConvStage>,
    pub downsample: usize,
    pub out_dim: usize,
}

impl ConvEncoder {
    /// `log2(downsample)` stages; channels double per stage and end at `out_dim`.
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        size: (usize, usize, usize),
        downsample: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (height, width, channels) = size;
        if downsample < 2 || !downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {downsample} must be a power of two >= 2"
            )));
        }
        if height % downsample != 0 || width % downsample != 0 {
            return Err(Error::shape(
                "encode_image",
                format!("{height}x{width} is not divisible by {downsample}"),
            ));
        }
        let depth = downsample.trailing_zeros() as usize;
        if !out_dim.is_multiple_of(1 << (depth - 1)) {
            return Err(Error::Config(format!(
                "latent dim {out_dim} must be divisible by {}",
                1 << (depth - 1)
            )));
        }
        let (mut h, mut w, mut c_in) = (height, width, channels);
        let mut stages = Vec::with_capacity(depth);
        for s in 0..depth {
            let c_out = out_dim >> (depth - 1 - s);
            let geom = ConvGeom {
                height: h,
                width: w,
                channels: c_in,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            stages.push(ConvStage {
                conv: Linear::new(store, &format!("enc.conv{s}"), geom.patch_len(), c_out, true, rng),
                norm: LayerNorm::new(store, &format!("enc.norm{s}"), c_out),
                geom,
            });
            h /= 2;
            w /= 2;
            c_in = c_out;
        }
        Ok(Self {
            stages,
            downsample,
            out_dim,
        })
    }

    /// `img`: `[H*W, C]` → `[h*w, d_v]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, img: Var) -> Result<Var> {
        let mut x = img;
        for st in &self.stages {
            let cols = g.im2col(x, st.geom)?;
            let y = st.conv.forward(g, p, cols)?;
            let y = st.norm.forward(g, p, y)?;
            x = g.gelu(y)?;
        }
        Ok(x)
    }
}

/// Compress the flattened grid to `n` vectors with learned queries.
///
/// When `n == h*w` there are no parameters and the output is the row-major
/// flattening of the grid.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub tokens: usize,
    pub grid_cells: usize,
    cross: Option<CrossResampler>,
}

#[derive(Debug, Clone)]
struct CrossResampler {
    queries: crate::nn::ParamId,
    attn: MultiHeadAttention,
    ln: LayerNorm,
    ffn: FeedForward,
    key_pos: Tensor<f64>,
}

impl Resampler {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        grid: (usize, usize),
        dim: usize,
        tokens: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cells = grid.0 * grid.1;
        if tokens == 0 || tokens > cells {
            return Err(Error::Config(format!(
                "token count {tokens} must be in 1..={cells} (latent grid cells)"
            )));
        }
        let cross = if tokens == cells {
            None
        } else {
            Some(CrossResampler {
                queries: store.normal("resampler.queries", &[tokens, dim], 1.0, rng),
                attn: MultiHeadAttention::new(store, "resampler.attn", dim, heads, rng)?,
                ln: LayerNorm::new(store, "resampler.ln", dim),
                ffn: FeedForward::new(store, "resampler.ffn", dim, 2 * dim, rng),
                key_pos: table_tensor(&sincos_2d(grid.0, grid.1, dim)),
            })
        };
        Ok(Self {
            tokens,
            grid_cells: cells,
            cross,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.cross.is_none()
    }

    /// `grid`: `[h*w, d_v]` → `[n, d_v]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, grid: Var) -> Result<Var> {
        let Some(cr) = &self.cross else {
            return Ok(grid);
        };
        let pos = g.constant(cr.key_pos.cast());
        let keys = g.add(grid, pos)?;
        let q = p.var(cr.queries);
        let attended = cr.attn.forward_qkv(g, p, q, keys, grid)?;
        let h = cr.ln.forward(g, p, attended)?;
        let h = cr.ffn.forward(g, p, h)?;
        g.add(attended, h)
    }
}

/// Per-token categorical weights over the vocabulary.
///
/// Logits are `(logits + noise) / tau`; `noise` is Gumbel(0,1) during
/// training and all-zero in deterministic evaluation.
pub fn gumbel_alpha<E: Element>(g: &mut Graph<E>, logits: Var, noise: Option<Tensor<E>>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let x = match noise {
        Some(n) => {
            let n = g.constant(n);
            g.add(logits, n)?
        }
        None => logits,
    };
    let x = g.scale(x, E::from_f64(1.0 / tau))?;
    g.softmax(x)
}

/// Eager single-row form of [`gumbel_alpha`].
pub fn gumbel_alpha_row<E: Element>(logits: &[E], noise: &[E], tau: f64) -> Result<Vec<E>> {
    if logits.len() != noise.len() {
        return Err(Error::shape("gumbel_alpha", "noise length differs from logits"));
    }
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(&[1, logits.len()], logits.to_vec())?);
    let a = gumbel_alpha(&mut g, l, Some(Tensor::new(&[1, noise.len()], noise.to_vec())?), tau)?;
    Ok(g.value(a).data().to_vec())
}

/// `count` i.i.d. Gumbel(0,1) samples, `-ln(-ln(u))` with `u` in (0,1).
pub fn gumbel_noise<E: Element>(count: usize, rng: &mut impl Rng) -> Vec<E> {
    (0..count)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            E::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// `v = alpha · L`: each row a convex combination of vocabulary rows.
pub fn embed_vocab<E: Element>(g: &mut Graph<E>, alpha: Var, table: Var) -> Result<Var> {
    g.matmul(alpha, table)
}

/// Exponentially decayed Gumbel temperature: `start → end` over `steps`,
/// then held at `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl TauSchedule {
    pub fn tau(&self, step: u64) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        self.start * (self.end / self.start).powf(step as f64 / self.steps as f64)
    }
}

/// Discrete token indices plus the codes they selected.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<E = f32> {
    pub indices: Vec<usize>,
    pub codes: Tensor<E>,
}

impl<E: Element> TokenSequence<E> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Codebook in the vocabulary embedding space, maintained by EMA.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<E = f32> {
    codes: Tensor<E>,
    ema_counts: Vec<E>,
    ema_sums: Tensor<E>,
    pub decay: f64,
    pub laplace_eps: f64,
}

impl<E: Element> Codebook<E> {
    /// Initialise with `size` distinct rows of the vocabulary table.
    pub fn from_vocab(
        vocab: &VocabTable<E>,
        size: usize,
        decay: f64,
        laplace_eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("codebook must be non-empty".into()));
        }
        if size > vocab.items() {
            return Err(Error::Config(format!(
                "codebook size {size} exceeds vocabulary size {}",
                vocab.items()
            )));
        }
        let picks = sample(rng, vocab.items(), size);
        let mut data = Vec::with_capacity(size * vocab.dim());
        for i in picks.iter() {
            data.extend_from_slice(vocab.table().row(i));
        }
        Self::from_codes(Tensor::new(&[size, vocab.dim()], data)?, decay, laplace_eps)
    }

    /// Start from explicit codes with unit EMA counts.
    pub fn from_codes(codes: Tensor<E>, decay: f64, laplace_eps: f64) -> Result<Self> {
        let (n, _) = codes.as_matrix("codebook")?;
        if !(0.0..1.0).contains(&decay) || laplace_eps <= 0.0 {
            return Err(Error::Config(format!(
                "EMA decay must be in [0,1) and laplace eps positive, got {decay}, {laplace_eps}"
            )));
        }
        Ok(Self {
            ema_sums: codes.clone(),
            ema_counts: vec![E::one(); n],
            codes,
            decay,
            laplace_eps,
        })
    }

    /// Rebuild from serialized EMA state; codes are derived.
    pub fn from_state(ema_counts: Vec<E>, ema_sums: Tensor<E>, decay: f64, laplace_eps: f64) -> Result<Self> {
        let (n, _) = ema_sums.as_matrix("codebook")?;
        if ema_counts.len() != n {
            return Err(Error::shape("codebook", "counts and sums disagree"));
        }
        let mut cb = Self {
            codes: ema_sums.clone(),
            ema_counts,
            ema_sums,
            decay,
            laplace_eps,
        };
        cb.refresh_codes();
        Ok(cb)
    }

    pub fn codes(&self) -> &Tensor<E> {
        &self.codes
    }

    pub fn ema_counts(&self) -> &[E] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor<E> {
        &self.ema_sums
    }

    pub fn size(&self) -> usize {
        self.codes.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.dims()[1]
    }

    fn refresh_codes(&mut self) {
        let eps = E::from_f64(self.laplace_eps);
        let d = self.dim();
        for i in 0..self.size() {
            let denom = self.ema_counts[i].max(eps);
            for j in 0..d {
                self.codes.data_mut()[i * d + j] = self.ema_sums.data()[i * d + j] / denom;
            }
        }
    }

    /// Index of the nearest code by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, v: &[E]) -> usize {
        let mut best = 0;
        let mut best_d = E::infinity();
        for (i, code) in self.codes.data().chunks_exact(self.dim()).enumerate() {
            let mut d = E::zero();
            for (&a, &b) in v.iter().zip(code) {
                d += (a - b) * (a - b);
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Snap every row of `v` to its nearest code.
    pub fn quantize(&self, v: &Tensor<E>) -> Result<TokenSequence<E>> {
        let (_, d) = v.as_matrix("quantize")?;
        if d != self.dim() {
            return Err(Error::shape(
                "quantize",
                format!("vector dim {d} vs code dim {}", self.dim()),
            ));
        }
        let indices: Vec<usize> = (0..v.rows()).map(|i| self.nearest(v.row(i))).collect();
        Ok(TokenSequence {
            codes: self.lookup(&indices)?,
            indices,
        })
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor<E>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.size() {
                return Err(Error::Contract(format!("code index {i} out of range {}", self.size())));
            }
            data.extend_from_slice(self.codes.row(i));
        }
        Tensor::new(&[indices.len(), d], data)
    }

    /// One EMA step over a batch of vectors and their assignments.
    pub fn ema_update(&mut self, v: &Tensor<E>, assignments: &[usize]) -> Result<()> {
        let d = self.dim();
        if v.rows() != assignments.len() || v.cols() != d {
            return Err(Error::shape("ema_update", "vectors and assignments disagree"));
        }
        let n = self.size();
        let mut counts = vec![E::zero(); n];
        let mut sums = vec![E::zero(); n * d];
        for (row, &a) in assignments.iter().enumerate() {
            if a >= n {
                return Err(Error::Contract(format!("assignment {a} out of range {n}")));
            }
            counts[a] += E::one();
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(v.row(row)) {
                *s += x;
            }
        }
        let gamma = E::from_f64(self.decay);
        let one_minus = E::from_f64(1.0 - self.decay);
        for i in 0..n {
            self.ema_counts[i] = gamma * self.ema_counts[i] + one_minus * counts[i];
        }
        for (s, &b) in self.ema_sums.data_mut().iter_mut().zip(&sums) {
            *s = gamma * *s + one_minus * b;
        }
        self.refresh_codes();
        Ok(())
    }

    /// Re-seed codes whose EMA count fell below `threshold` with random rows
    /// of `candidates`. Returns how many codes were replaced.
    pub fn restart_dead(&mut self, threshold: f64, candidates: &Tensor<E>, rng: &mut impl Rng) -> usize {
        let thr = E::from_f64(threshold);
        let d = self.dim();
        let mut replaced = 0;
        for i in 0..self.size() {
            if self.ema_counts[i] < thr {
                let r = rng.random_range(0..candidates.rows());
                self.ema_sums.data_mut()[i * d..(i + 1) * d].copy_from_slice(candidates.row(r));
                self.ema_counts[i] = E::one();
                replaced += 1;
            }
        }
        if replaced > 0 {
            self.refresh_codes();
        }
        replaced
    }

    pub fn cast<F: Element>(&self) -> Codebook<F> {
        Codebook {
            codes: self.codes.cast(),
            ema_counts: self.ema_counts.iter().map(|&c| F::from_f64(c.to_f64())).collect(),
            ema_sums: self.ema_sums.cast(),
            decay: self.decay,
            laplace_eps: self.laplace_eps,
        }
    }
}

/// Codebook usage diagnostics over a window of assignments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookStats {
    /// Fraction of codes used at least once.
    pub utilization: f64,
    /// `exp(entropy)` of the empirical assignment distribution.
    pub perplexity: f64,
}

pub fn codebook_stats(codebook_size: usize, assignments: &[usize]) -> Result<CodebookStats> {
    if assignments.is_empty() {
        return Err(Error::Contract("codebook stats need at least one assignment".into()));
    }
    let mut hist = vec![0usize; codebook_size];
    for &a in assignments {
        if a >= codebook_size {
            return Err(Error::Contract(format!("assignment {a} out of range {codebook_size}")));
        }
        hist[a] += 1;
    }
    let total = assignments.len() as f64;
    let used = hist.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        utilization: used as f64 / codebook_size as f64,
        perplexity: entropy.exp(),
    })
}
