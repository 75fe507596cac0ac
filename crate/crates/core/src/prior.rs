//! Small decoder-only transformer over control symbols plus visual tokens.
//!
//! Id layout: `PAD`, `BOS`, `STOP`, one symbol per class, then one id per
//! codebook entry starting at `visual_offset`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Linear, ParamId, ParamStore, Transformer};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::resampler::{Codebook, TokenSequence};
use crate::tensor::{kernels, Element, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const STOP: usize = 2;
const FIRST_CLASS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtendedVocab {
    pub base_size: usize,
    pub visual_offset: usize,
    pub codebook_size: usize,
}

impl ExtendedVocab {
    pub fn new(num_classes: usize, codebook_size: usize) -> Self {
        let base_size = FIRST_CLASS + num_classes;
        Self {
            base_size,
            visual_offset: base_size,
            codebook_size,
        }
    }

    pub fn total(&self) -> usize {
        self.base_size + self.codebook_size
    }

    pub fn class_id(&self, class: usize) -> Result<usize> {
        if FIRST_CLASS + class >= self.base_size {
            return Err(Error::Contract(format!("class {class} has no prefix symbol")));
        }
        Ok(FIRST_CLASS + class)
    }

    pub fn visual_id(&self, code: usize) -> usize {
        self.visual_offset + code
    }

    pub fn code_index(&self, id: usize) -> Option<usize> {
        (id >= self.visual_offset && id < self.total()).then(|| id - self.visual_offset)
    }

    pub fn is_visual(&self, id: usize) -> bool {
        self.code_index(id).is_some()
    }
}

/// Vocabulary plus the initial embedding table and the fixed projection
/// that placed the codebook in it.
#[derive(Debug, Clone)]
pub struct VocabInit<E = f32> {
    pub vocab: ExtendedVocab,
    pub embedding: Tensor<E>,
    pub projection: Tensor<E>,
}

/// Base rows are random; visual rows are `codes · projection`.
pub fn build_vocab<E: Element>(
    codebook: &Codebook<E>,
    num_classes: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<VocabInit<E>> {
    let vocab = ExtendedVocab::new(num_classes, codebook.size());
    let gauss = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<E> {
        (0..n)
            .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let projection = Tensor::new(&[codebook.dim(), width], gauss(rng, codebook.dim() * width))?;
    let visual = codebook.codes().matmul(&projection)?;
    let mut rows = gauss(rng, vocab.base_size * width);
    rows.extend_from_slice(visual.data());
    Ok(VocabInit {
        vocab,
        embedding: Tensor::new(&[vocab.total(), width], rows)?,
        projection,
    })
}

/// An instruction prefix and the visual tokens it should produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationSample {
    pub prefix: Vec<usize>,
    /// Visual ids followed by exactly one `STOP`.
    pub target: Vec<usize>,
}

impl ConversationSample {
    pub fn for_class(vocab: &ExtendedVocab, class: usize, codes: &[usize]) -> Result<Self> {
        let mut target: Vec<usize> = codes.iter().map(|&c| vocab.visual_id(c)).collect();
        target.push(STOP);
        let s = Self {
            prefix: vec![BOS, vocab.class_id(class)?],
            target,
        };
        s.validate(vocab)?;
        Ok(s)
    }

    pub fn validate(&self, vocab: &ExtendedVocab) -> Result<()> {
        let Some((&last, body)) = self.target.split_last() else {
            return Err(Error::Contract("empty target".into()));
        };
        if last != STOP || !body.iter().all(|&id| vocab.is_visual(id)) {
            return Err(Error::Contract("target must be visual ids then one stop".into()));
        }
        if self.prefix.is_empty() || self.prefix.iter().any(|&id| id >= vocab.base_size) {
            return Err(Error::Contract("prefix must be non-empty base symbols".into()));
        }
        Ok(())
    }

    fn sequence(&self) -> Vec<usize> {
        self.prefix.iter().chain(&self.target).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Stopped,
    /// Hit `max_len` without emitting `STOP`.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Emitted visual ids, without the stop symbol.
    pub ids: Vec<usize>,
    pub completion: Completion,
}

/// How a generated sequence was fitted to the tokenizer's length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthFit {
    Exact,
    /// Repeated the last code this many times.
    Padded(usize),
    /// Dropped this many trailing codes.
    Truncated(usize),
}

impl Generation {
    pub fn to_tokens<E: Element>(
        &self,
        vocab: &ExtendedVocab,
        codebook: &Codebook<E>,
        n: usize,
    ) -> Result<(TokenSequence<E>, LengthFit)> {
        let mut idx: Vec<usize> = self
            .ids
            .iter()
            .map(|&id| {
                vocab
                    .code_index(id)
                    .ok_or_else(|| Error::Contract(format!("id {id} is not visual")))
            })
            .collect::<Result<_>>()?;
        let fit = match idx.len().cmp(&n) {
            std::cmp::Ordering::Equal => LengthFit::Exact,
            std::cmp::Ordering::Greater => {
                let extra = idx.len() - n;
                idx.truncate(n);
                LengthFit::Truncated(extra)
            }
            std::cmp::Ordering::Less => {
                let missing = n - idx.len();
                let fill = idx.last().copied().unwrap_or(0);
                idx.resize(n, fill);
                LengthFit::Padded(missing)
            }
        };
        let codes = codebook.lookup(&idx)?;
        Ok((TokenSequence { indices: idx, codes }, fit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Prior<E = f32> {
    pub vocab: ExtendedVocab,
    pub params: ParamStore<E>,
    pub width: usize,
    pub context: usize,
    pub freeze_visual: bool,
    embed: ParamId,
    pos: ParamId,
    body: Transformer,
    head: Linear,
}

impl<E: Element> Prior<E> {
    pub fn new(config: &Config, codebook: &Codebook<E>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        let w = config.prior_width;
        let init = build_vocab(codebook, config.num_classes, w, &mut rng)?;
        let mut params = ParamStore::new();
        let embed = params.add("prior.embed", init.embedding);
        let pos = params.normal("prior.pos", &[config.prior_context, w], 0.02, &mut rng);
        let body = Transformer::new(
            &mut params,
            "prior.body",
            config.prior_blocks,
            w,
            config.prior_heads,
            &mut rng,
        )?;
        let head = Linear::new(&mut params, "prior.head", w, init.vocab.total(), true, &mut rng);
        Ok(Self {
            vocab: init.vocab,
            params,
            width: w,
            context: config.prior_context,
            freeze_visual: config.prior_freeze_visual,
            embed,
            pos,
            body,
            head,
        })
    }

    pub fn embedding(&self) -> &Tensor<E> {
        self.params.get(self.embed)
    }

    /// Next-token logits for every position of `ids`, `[len, total]`.
    pub fn logits(&self, g: &mut Graph<E>, p: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.context {
            return Err(Error::Config(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.context
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab.total()) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        let x = g.gather_rows(p.var(self.embed), ids)?;
        let pos = g.slice_rows(p.var(self.pos), 0, ids.len())?;
        let x = g.add(x, pos)?;
        let h = self.body.forward(g, p, x, true)?;
        self.head.forward(g, p, h)
    }

    /// Cross-entropy over target positions only.
    pub fn loss(&self, g: &mut Graph<E>, p: &Bound, batch: &[&ConversationSample]) -> Result<Var> {
        let mut all = Vec::with_capacity(batch.len());
        let mut labels = Vec::new();
        for s in batch {
            s.validate(&self.vocab)?;
            let seq = s.sequence();
            let inputs = &seq[..seq.len() - 1];
            all.push(self.logits(g, p, inputs)?);
            labels.extend((0..inputs.len()).map(|i| (i + 1 >= s.prefix.len()).then(|| seq[i + 1])));
        }
        let logits = g.concat_rows(&all)?;
        g.cross_entropy(logits, &labels)
    }

    /// Adam over `steps` batches taken cyclically from `corpus`.
    pub fn fit(
        &mut self,
        corpus: &[ConversationSample],
        config: &Config,
        mut log: impl FnMut(&PriorReport),
    ) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Contract("empty prior corpus".into()));
        }
        let mut adam = Adam::new(
            AdamConfig {
                lr: config.prior_lr,
                clip_norm: config.clip_norm,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let sched = LrSchedule {
            base_lr: config.prior_lr,
            total_steps: config.prior_steps,
            warmup_frac: config.warmup_frac,
        };
        let bs = config.prior_batch.min(corpus.len());
        for step in 0..config.prior_steps {
            let batch: Vec<&ConversationSample> = (0..bs)
                .map(|j| &corpus[(step as usize * bs + j) % corpus.len()])
                .collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let loss = self.loss(&mut g, &p, &batch)?;
            let value = g.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "prior loss" });
            }
            g.backward(loss)?;
            let mut grads = self.params.grads(&g, &p);
            if self.freeze_visual {
                let w = self.width;
                let start = self.vocab.visual_offset * w;
                grads[self.embed_index()].data_mut()[start..].fill(E::zero());
            }
            let lr = sched.lr(step);
            adam.step(&mut self.params, &grads, lr)?;
            log(&PriorReport { step, loss: value, lr });
        }
        Ok(())
    }

    fn embed_index(&self) -> usize {
        self.params
            .iter()
            .position(|(name, _)| name == "prior.embed")
            .expect("embedding registered")
    }

    /// Teacher-forced argmax accuracy over target positions.
    pub fn accuracy(&self, corpus: &[ConversationSample]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (mut hit, mut total) = (0usize, 0usize);
        for s in corpus {
            let seq = s.sequence();
            let logits = self.logits(&mut g, &p, &seq[..seq.len() - 1])?;
            let lv = g.value(logits);
            for i in s.prefix.len() - 1..seq.len() - 1 {
                hit += usize::from(argmax(lv.row(i)) == seq[i + 1]);
                total += 1;
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// Sample visual ids after `prefix` until `STOP` or `max_len` ids.
    /// Only visual ids and `STOP` can be emitted. `temperature == 0` is greedy
    /// and ignores `seed`.
    pub fn generate(&self, prefix: &[usize], temperature: f64, max_len: usize, seed: u64) -> Result<Generation> {
        if !(temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {temperature} must be >= 0")));
        }
        if prefix.is_empty() || prefix.len() + max_len > self.context {
            return Err(Error::Config(format!(
                "prefix {} plus {max_len} tokens exceeds context {}",
                prefix.len(),
                self.context
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut seq = prefix.to_vec();
        let mut ids = Vec::with_capacity(max_len);
        while ids.len() < max_len {
            let logits = self.logits(&mut g, &p, &seq)?;
            let row = g.value(logits).row(seq.len() - 1);
            let next = self.pick(row, temperature, &mut rng);
            if next == STOP {
                return Ok(Generation {
                    ids,
                    completion: Completion::Stopped,
                });
            }
            ids.push(next);
            seq.push(next);
        }
        Ok(Generation {
            ids,
            completion: Completion::Truncated,
        })
    }

    fn pick(&self, row: &[E], temperature: f64, rng: &mut impl Rng) -> usize {
        let allowed = |id: usize| id == STOP || self.vocab.is_visual(id);
        let mut masked: Vec<E> = row
            .iter()
            .enumerate()
            .map(|(i, &v)| if allowed(i) { v } else { E::neg_infinity() })
            .collect();
        if temperature == 0.0 {
            return argmax(&masked);
        }
        let inv = E::from_f64(1.0 / temperature);
        for v in masked.iter_mut() {
            *v = *v * inv;
        }
        kernels::softmax_row(&mut masked);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = STOP;
        for (i, &q) in masked.iter().enumerate() {
            if q > E::zero() {
                acc += q.to_f64();
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of the pooled id histogram.
pub fn token_entropy(seqs: &[Generation]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for s in seqs {
        for &id in &s.ids {
            *counts.entry(id).or_insert(0usize) += 1;
            total += 1;
        }
    }
    counts
        .values()
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Config, Codebook<f64>) {
        let cfg = Config {
            codebook_size: 6,
            vocab_dim: 4,
            tokens: 3,
            prior_width: 16,
            prior_blocks: 1,
            prior_heads: 2,
            prior_context: 8,
            num_classes: 2,
            ..Config::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
        let cb = Codebook::from_codes(Tensor::from_f64(&[6, 4], &data).unwrap(), 0.99, 1e-5).unwrap();
        (cfg, cb)
    }

    #[test]
    fn vocab_layout_and_bijection() {
        let (cfg, cb) = setup();
        let prior = Prior::new(&cfg, &cb).unwrap();
        let v = prior.vocab;
        assert_eq!(v.total(), v.base_size + 6);
        for i in 0..6 {
            assert_eq!(v.code_index(v.visual_id(i)), Some(i));
        }
        assert_eq!(v.code_index(STOP), None);
    }

    #[test]
    fn visual_rows_are_projected_codes() {
        let (_, cb) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = build_vocab(&cb, 2, 8, &mut rng).unwrap();
        let proj = cb.codes().matmul(&init.projection).unwrap();
        for i in 0..6 {
            let row = init.embedding.row(init.vocab.visual_id(i));
            for (a, b) in row.iter().zip(proj.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_validation() {
        let v = ExtendedVocab::new(2, 6);
        let s = ConversationSample::for_class(&v, 1, &[0, 5]).unwrap();
        assert_eq!(s.target, vec![v.visual_id(0), v.visual_id(5), STOP]);
        assert!(ConversationSample::for_class(&v, 2, &[0]).is_err());
        let bad = ConversationSample {
            prefix: vec![BOS],
            target: vec![STOP, STOP],
        };
        assert!(bad.validate(&v).is_err());
    }

    #[test]
    fn greedy_generation_ignores_seed() {
        let (cfg, cb) = setup();
        let prior = Prior::new(&cfg, &cb).unwrap();
        let prefix = [BOS, prior.vocab.class_id(0).unwrap()];
        let a = prior.generate(&prefix, 0.0, 4, 1).unwrap();
        assert_eq!(a, prior.generate(&prefix, 0.0, 4, 99).unwrap());
        assert!(a.ids.iter().all(|&id| prior.vocab.is_visual(id)));
        assert!(prior.generate(&prefix, 0.0, 7, 1).is_err());
    }

    #[test]
    fn length_fit() {
        let (_, cb) = setup();
        let v = ExtendedVocab::new(2, 6);
        let g = Generation {
            ids: vec![v.visual_id(3)],
            completion: Completion::Stopped,
        };
        let (t, fit) = g.to_tokens(&v, &cb, 3).unwrap();
        assert_eq!((t.indices, fit), (vec![3, 3, 3], LengthFit::Padded(2)));
        let (t, fit) = g.to_tokens(&v, &cb, 1).unwrap();
        assert_eq!((t.indices, fit), (vec![3], LengthFit::Exact));
    }
}
