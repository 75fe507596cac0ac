//! Masked transformer encoder-decoder and the rectified-flow velocity head.
//!
//! Training-time data flow for one image:
//!
//! ```text
//! tokens ─ proj ─┐
//!                ├─ encoder ─ [context ; mask tokens + pos] ─ decoder ─ cond (one per masked patch)
//! revealed ──────┘
//! cond, z_t = (1-t) z + t eps, t ─ velocity head ─ regress eps - z
//! ```

use rand::{seq::index::sample, Rng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{sincos_2d, table_tensor, timestep_embedding, Bound, Linear, ParamId, ParamStore, Transformer, LN_EPS};
use crate::tensor::{Element, Tensor};

/// Row-major set of non-overlapping `P x P x C` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// `rows*cols` flattened patches, each `P*P*C` values in HWC order.
    pub patches: Vec<Vec<f32>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

pub fn patchify(img: &Image, patch: usize) -> Result<PatchSet> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} is not divisible by patch size {patch}", img.height, img.width),
        ));
    }
    let (rows, cols, c) = (img.height / patch, img.width / patch, img.channels);
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut v = Vec::with_capacity(patch * patch * c);
            for y in 0..patch {
                let start = ((pr * patch + y) * img.width + pc * patch) * c;
                v.extend_from_slice(&img.data[start..start + patch * c]);
            }
            patches.push(v);
        }
    }
    Ok(PatchSet {
        patch,
        channels: c,
        rows,
        cols,
        patches,
    })
}

pub fn unpatchify(set: &PatchSet) -> Result<Image> {
    let (p, c) = (set.patch, set.channels);
    let (h, w) = (set.rows * p, set.cols * p);
    if set.patches.len() != set.rows * set.cols || set.patches.iter().any(|v| v.len() != p * p * c) {
        return Err(Error::shape("unpatchify", "patch count or size disagrees with layout"));
    }
    let mut data = vec![0.0; h * w * c];
    for (idx, v) in set.patches.iter().enumerate() {
        let (pr, pc) = (idx / set.cols, idx % set.cols);
        for y in 0..p {
            let start = ((pr * p + y) * w + pc * p) * c;
            data[start..start + p * c].copy_from_slice(&v[y * p * c..(y + 1) * p * c]);
        }
    }
    Image::new(h, w, c, data)
}

/// Partition of patch indices into masked and revealed sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub ratio: f64,
    /// Sorted ascending.
    pub masked: Vec<usize>,
    /// Sorted ascending.
    pub revealed: Vec<usize>,
}

impl MaskState {
    /// Mask exactly the given indices of `0..n`.
    pub fn from_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n) {
            return Err(Error::Contract(format!("masked index out of range {n}")));
        }
        let revealed = (0..n).filter(|i| masked.binary_search(i).is_err()).collect();
        Ok(Self {
            ratio: masked.len() as f64 / n as f64,
            masked,
            revealed,
        })
    }

    /// Mask `round(ratio * n)` indices chosen uniformly without replacement.
    pub fn with_ratio(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("cannot mask an empty patch set".into()));
        }
        let k = ((ratio * n as f64).round() as usize).min(n);
        let masked = sample(rng, n, k).into_vec();
        let mut s = Self::from_masked(n, masked)?;
        s.ratio = ratio;
        Ok(s)
    }
}

pub const MASK_RATIO_MIN: f64 = 0.7;
pub const MASK_RATIO_MAX: f64 = 1.0;

/// Draw `rho ~ U[0.7, 1.0]` and mask `round(rho * n)` patches.
pub fn sample_mask(n: usize, rng: &mut impl Rng) -> Result<MaskState> {
    let ratio = rng.random_range(MASK_RATIO_MIN..=MASK_RATIO_MAX);
    MaskState::with_ratio(n, ratio, rng)
}

/// Straight-line path `z_t = (1 - t) z + t eps`.
pub fn make_path<E: Element>(z: &[E], eps: &[E], t: f64) -> Result<Vec<E>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("path time {t} outside [0, 1]")));
    }
    if z.len() != eps.len() {
        return Err(Error::shape("make_path", "z and eps differ in length"));
    }
    if t == 0.0 {
        return Ok(z.to_vec());
    }
    if t == 1.0 {
        return Ok(eps.to_vec());
    }
    let (a, b) = (E::from_f64(1.0 - t), E::from_f64(t));
    Ok(z.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One draw of `(t, eps)` per row of clean patch vectors, with the noisy
/// inputs and velocity targets it implies.
#[derive(Debug, Clone)]
pub struct FlowDraw<E = f32> {
    pub t: Vec<f64>,
    pub eps: Tensor<E>,
    pub z_t: Tensor<E>,
    /// `eps - z`, the time-derivative of the path.
    pub target: Tensor<E>,
}

impl<E: Element> FlowDraw<E> {
    pub fn sample(z: &Tensor<E>, rng: &mut impl Rng) -> Result<Self> {
        let d = z.cols();
        let mut t = Vec::with_capacity(z.rows());
        let mut eps = Vec::with_capacity(z.len());
        for _ in 0..z.rows() {
            t.push(rng.random::<f64>());
            eps.extend((0..d).map(|_| E::from_f64(rng.sample(StandardNormal))));
        }
        let eps = Tensor::new(z.dims(), eps)?;
        Self::from_parts(z, eps, t)
    }

    pub fn from_parts(z: &Tensor<E>, eps: Tensor<E>, t: Vec<f64>) -> Result<Self> {
        if z.dims() != eps.dims() || t.len() != z.rows() {
            return Err(Error::shape("flow_draw", "z, eps and t disagree"));
        }
        let mut z_t = Vec::with_capacity(z.len());
        let mut target = Vec::with_capacity(z.len());
        for (i, &ti) in t.iter().enumerate() {
            z_t.extend(make_path(z.row(i), eps.row(i), ti)?);
            target.extend(z.row(i).iter().zip(eps.row(i)).map(|(&a, &e)| e - a));
        }
        Ok(Self {
            t,
            z_t: Tensor::new(z.dims(), z_t)?,
            target: Tensor::new(z.dims(), target)?,
            eps,
        })
    }
}

/// Flow-matching loss: mean squared error between predicted velocity and `eps - z`.
pub fn fm_loss<E: Element>(g: &mut Graph<E>, prediction: Var, draw: &FlowDraw<E>) -> Result<Var> {
    let target = g.constant(draw.target.clone());
    g.mse(prediction, target)
}

/// Architecture of the decoder side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    pub grid: (usize, usize),
    pub patch_dim: usize,
    pub tokens: usize,
    pub code_dim: usize,
    pub width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub velocity_width: usize,
    pub velocity_blocks: usize,
}

/// Residual MLP block whose layer norm is shifted, scaled and gated by the
/// `(t, cond)` embedding.
#[derive(Debug, Clone)]
struct HeadBlock {
    modulation: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Lightweight MLP predicting velocity from `(z_t, t, cond)`.
///
/// `t` and `cond` are embedded and summed into one conditioning vector that
/// modulates every block; `z_t` enters through the input projection.
#[derive(Debug, Clone)]
pub struct VelocityHead {
    z_in: Linear,
    t_in: Linear,
    c_in: Linear,
    blocks: Vec<HeadBlock>,
    final_mod: Linear,
    out: Linear,
    pub time_dim: usize,
    pub width: usize,
}

impl VelocityHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        patch_dim: usize,
        cond_dim: usize,
        time_dim: usize,
        width: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| HeadBlock {
                modulation: Linear::zeroed(store, &format!("head.{i}.mod"), width, 3 * width),
                fc1: Linear::new(store, &format!("head.{i}.fc1"), width, width, true, rng),
                fc2: Linear::new(store, &format!("head.{i}.fc2"), width, width, true, rng),
            })
            .collect();
        Self {
            z_in: Linear::new(store, "head.z_in", patch_dim, width, true, rng),
            t_in: Linear::new(store, "head.t_in", time_dim, width, true, rng),
            c_in: Linear::new(store, "head.c_in", cond_dim, width, false, rng),
            blocks,
            final_mod: Linear::zeroed(store, "head.final_mod", width, 2 * width),
            out: Linear::zeroed(store, "head.out", width, patch_dim),
            time_dim,
            width,
        }
    }

    /// `z_t`: `[R, patch_dim]`, one time per row, `cond`: `[R, cond_dim]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bound, z_t: Var, t: &[f64], cond: Var) -> Result<Var> {
        let rows = g.value(z_t).rows();
        if t.len() != rows {
            return Err(Error::shape(
                "velocity",
                format!("{} times for {:?}", t.len(), g.dims(z_t)),
            ));
        }
        let w = self.width;
        let temb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti, self.time_dim)).collect();
        let temb = g.constant(Tensor::from_f64(&[rows, self.time_dim], &temb)?);
        let ht = self.t_in.forward(g, p, temb)?;
        let hc = self.c_in.forward(g, p, cond)?;
        let c = g.add(ht, hc)?;
        let c = g.silu(c)?;
        let ones = g.constant(Tensor::full(&[w], E::one()));
        let zeros = g.constant(Tensor::zeros(&[w]));
        let mut h = self.z_in.forward(g, p, z_t)?;
        for b in &self.blocks {
            let m = b.modulation.forward(g, p, c)?;
            let shift = g.slice_cols(m, 0, w)?;
            let scale = g.slice_cols(m, w, w)?;
            let gate = g.slice_cols(m, 2 * w, w)?;
            let x = g.layer_norm(h, ones, zeros, LN_EPS)?;
            let x = modulate(g, x, shift, scale)?;
            let x = b.fc1.forward(g, p, x)?;
            let x = g.silu(x)?;
            let x = b.fc2.forward(g, p, x)?;
            let x = g.mul(x, gate)?;
            h = g.add(h, x)?;
        }
        let m = self.final_mod.forward(g, p, c)?;
        let shift = g.slice_cols(m, 0, w)?;
        let scale = g.slice_cols(m, w, w)?;
        let x = g.layer_norm(h, ones, zeros, LN_EPS)?;
        let x = modulate(g, x, shift, scale)?;
        self.out.forward(g, p, x)
    }
}

/// `x * (1 + scale) + shift`
fn modulate<E: Element>(g: &mut Graph<E>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xs = g.mul(x, scale)?;
    let y = g.add(x, xs)?;
    g.add(y, shift)
}

/// Transformer encoder-decoder producing per-masked-patch conditioning.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub dims: DecoderDims,
    token_proj: Linear,
    token_pos: ParamId,
    patch_embed: Linear,
    patch_pos: Tensor<f64>,
    encoder: Transformer,
    mask_token: ParamId,
    decoder: Transformer,
    dummy: ParamId,
    pub head: VelocityHead,
}

impl Decoder {
    pub fn new<E: Element>(store: &mut ParamStore<E>, dims: DecoderDims, rng: &mut impl Rng) -> Result<Self> {
        if !dims.width.is_multiple_of(4) || !dims.time_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "model width must be divisible by 4 and time dim even".into(),
            ));
        }
        let w = dims.width;
        Ok(Self {
            token_proj: Linear::new(store, "dec.token_proj", dims.code_dim, w, true, rng),
            token_pos: store.normal("dec.token_pos", &[dims.tokens, w], 0.02, rng),
            patch_embed: Linear::new(store, "dec.patch_embed", dims.patch_dim, w, true, rng),
            patch_pos: table_tensor(&sincos_2d(dims.grid.0, dims.grid.1, w)),
            encoder: Transformer::new(store, "dec.encoder", dims.encoder_blocks, w, dims.heads, rng)?,
            mask_token: store.normal("dec.mask_token", &[1, w], 0.02, rng),
            decoder: Transformer::new(store, "dec.decoder", dims.decoder_blocks, w, dims.heads, rng)?,
            dummy: store.normal("dec.dummy", &[1, w], 0.02, rng),
            head: VelocityHead::new(
                store,
                dims.patch_dim,
                w,
                dims.time_dim,
                dims.velocity_width,
                dims.velocity_blocks,
                rng,
            ),
            dims,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.dims.grid.0 * self.dims.grid.1
    }

    /// Project `[n, d_l]` token codes to model width and add slot embeddings.
    pub fn embed_tokens<E: Element>(&self, g: &mut Graph<E>, p: &Bound, codes: Var) -> Result<Var> {
        if g.dims(codes) != [self.dims.tokens, self.dims.code_dim] {
            return Err(Error::shape("embed_tokens", format!("{:?}", g.dims(codes))));
        }
        let x = self.token_proj.forward(g, p, codes)?;
        g.add(x, p.var(self.token_pos))
    }

    fn pos_rows<E: Element>(&self, g: &mut Graph<E>, idx: &[usize]) -> Result<Var> {
        let w = self.dims.width;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.num_patches() {
                return Err(Error::Contract(format!("patch index {i} out of range")));
            }
            data.extend(self.patch_pos.row(i).iter().map(|&v| E::from_f64(v)));
        }
        Ok(g.constant(Tensor::new(&[idx.len(), w], data)?))
    }

    /// Encoder over `[tokens ; revealed patches]`. `revealed_patches` holds
    /// one row per index in `revealed`, in model space.
    pub fn encode_context<E: Element>(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        token_emb: Var,
        revealed: &[usize],
        revealed_patches: Option<Var>,
    ) -> Result<Var> {
        let input = match (revealed.is_empty(), revealed_patches) {
            (true, _) => token_emb,
            (false, Some(rp)) => {
                if g.value(rp).rows() != revealed.len() {
                    return Err(Error::shape("encode_context", "revealed rows disagree with indices"));
                }
                let e = self.patch_embed.forward(g, p, rp)?;
                let pos = self.pos_rows(g, revealed)?;
                let e = g.add(e, pos)?;
                g.concat_rows(&[token_emb, e])?
            }
            (false, None) => return Err(Error::Contract("revealed indices without patch values".into())),
        };
        self.encoder.forward(g, p, input, false)
    }

    /// One conditioning vector per masked patch; `None` when nothing is masked.
    pub fn decode_mask<E: Element>(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        context: Var,
        masked: &[usize],
    ) -> Result<Option<Var>> {
        if masked.is_empty() {
            return Ok(None);
        }
        let m = g.gather_rows(p.var(self.mask_token), &vec![0; masked.len()])?;
        let pos = self.pos_rows(g, masked)?;
        let m = g.add(m, pos)?;
        let ctx_len = g.value(context).rows();
        let x = g.concat_rows(&[context, m])?;
        let y = self.decoder.forward(g, p, x, false)?;
        Ok(Some(g.slice_rows(y, ctx_len, masked.len())?))
    }

    /// The learned unconditional embedding, repeated `rows` times.
    pub fn dummy_rows<E: Element>(&self, g: &mut Graph<E>, p: &Bound, rows: usize) -> Result<Var> {
        g.gather_rows(p.var(self.dummy), &vec![0; rows])
    }

    pub fn dummy_id(&self) -> ParamId {
        self.dummy
    }
}

/// Map unit-range pixels to the `[-1, 1]` space the flow runs in.
pub fn to_model_space(v: &[f32]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|&x| 2.0 * x as f64 - 1.0)
}

pub fn from_model_space(v: f64) -> f32 {
    ((v + 1.0) * 0.5) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c).map(|i| i as f32 / (h * w * c) as f32).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn patchify_shape_and_roundtrip() {
        let img = ramp(32, 32, 3);
        let set = patchify(&img, 8).unwrap();
        assert_eq!((set.len(), set.rows, set.cols), (16, 4, 4));
        assert_eq!(unpatchify(&set).unwrap(), img);
        assert!(matches!(patchify(&ramp(30, 32, 3), 8), Err(Error::Shape { .. })));
    }

    #[test]
    fn patch_one_one_matches_direct_indexing() {
        let img = ramp(16, 16, 3);
        let set = patchify(&img, 8).unwrap();
        let patch = &set.patches[set.cols + 1];
        let mut k = 0;
        for y in 8..16 {
            for x in 8..16 {
                for c in 0..3 {
                    assert_eq!(patch[k], img.at(y, x, c));
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn mask_ratio_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = MaskState::with_ratio(16, 1.0, &mut rng).unwrap();
        assert_eq!(all.masked.len(), 16);
        assert!(all.revealed.is_empty());
        let m = MaskState::with_ratio(10, 0.7, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 7);
        assert_eq!(m.revealed.len(), 3);
        for r in &m.revealed {
            assert!(!m.masked.contains(r));
        }
    }

    #[test]
    fn make_path_examples() {
        let z = [2.0f64, -1.0];
        let e = [0.3f64, 0.9];
        assert_eq!(make_path(&z, &e, 0.0).unwrap(), z);
        assert_eq!(make_path(&z, &e, 1.0).unwrap(), e);
        assert_eq!(make_path(&[2.0f64], &[0.0], 0.5).unwrap(), vec![1.0]);
        assert!(matches!(make_path(&z, &e, 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn fm_loss_oracle_head_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.2, -0.3, 0.5, -0.5, 0.0]).unwrap();
        let draw = FlowDraw::sample(&z, &mut rng).unwrap();
        let mut g = Graph::new();
        let exact = g.constant(draw.eps.clone());
        let zc = g.constant(z.clone());
        let oracle = g.sub(exact, zc).unwrap();
        let l = fm_loss(&mut g, oracle, &draw).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let shifted = g.constant(draw.target.map(|v| v + 0.5));
        let l = fm_loss(&mut g, shifted, &draw).unwrap();
        assert!((g.value(l).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_decodes_to_nothing() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = DecoderDims {
            grid: (1, 2),
            patch_dim: 4,
            tokens: 2,
            code_dim: 3,
            width: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            heads: 2,
            time_dim: 4,
            velocity_width: 8,
            velocity_blocks: 1,
        };
        let dec = Decoder::new(&mut store, dims, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let codes = g.constant(Tensor::full(&[2, 3], 0.1));
        let tok = dec.embed_tokens(&mut g, &p, codes).unwrap();
        let ctx = dec.encode_context(&mut g, &p, tok, &[], None).unwrap();
        assert_eq!(g.value(ctx).rows(), 2);
        assert!(dec.decode_mask(&mut g, &p, ctx, &[]).unwrap().is_none());
        let c = dec.decode_mask(&mut g, &p, ctx, &[0, 1]).unwrap().unwrap();
        assert_eq!(g.dims(c), &[2, 8]);
    }
}
