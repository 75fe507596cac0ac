//! The full tokenizer: resampler front end, codebook, and flow decoder, plus
//! the training loop that ties them together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::decoder::{fm_loss, patchify, sample_mask, to_model_space, Decoder, DecoderDims, FlowDraw, MaskState};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Bound, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::resampler::{
    embed_vocab, gumbel_alpha, gumbel_noise, Codebook, ConvEncoder, Resampler, TauSchedule, TokenSequence, VocabTable,
};
use crate::tensor::{Element, Tensor};

/// Stream ids keep the independent random draws of one seed apart.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;

#[derive(Debug, Clone)]
pub struct Tokenizer<E = f32> {
    pub config: Config,
    pub params: ParamStore<E>,
    pub vocab: VocabTable<E>,
    pub codebook: Codebook<E>,
    encoder: ConvEncoder,
    resampler: Resampler,
    generator: Linear,
    pub decoder: Decoder,
}

/// Graph handles produced while encoding one image.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Vocabulary-space embeddings `v = alpha · L`, `[n, d_l]`.
    pub v: Var,
    /// What the decoder consumes: `v`, or quantized codes with a
    /// straight-through gradient onto `v`.
    pub codes: Var,
}

/// Scalars and codebook inputs of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossParts<E = f32> {
    pub loss: Var,
    pub fm: Var,
    pub commit: Option<Var>,
    pub v_rows: Tensor<E>,
    pub assignments: Vec<usize>,
}

impl<E: Element> Tokenizer<E> {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_INIT);
        let c = &config;
        let vocab = VocabTable::random(c.vocab_size, c.vocab_dim, &mut rng)?;
        let codebook = Codebook::from_vocab(&vocab, c.codebook_size, c.ema_decay, c.laplace_eps, &mut rng)?;
        let mut params = ParamStore::new();
        let grid = c.image_size / c.downsample;
        let encoder = ConvEncoder::new(
            &mut params,
            (c.image_size, c.image_size, c.channels),
            c.downsample,
            c.latent_dim,
            &mut rng,
        )?;
        let resampler = Resampler::new(
            &mut params,
            (grid, grid),
            c.latent_dim,
            c.tokens,
            c.resampler_heads,
            &mut rng,
        )?;
        let generator = Linear::new(&mut params, "generator", c.latent_dim, c.vocab_size, true, &mut rng);
        let side = c.image_size / c.patch;
        let dims = DecoderDims {
            grid: (side, side),
            patch_dim: c.patch * c.patch * c.channels,
            tokens: c.tokens,
            code_dim: c.vocab_dim,
            width: c.model_width,
            encoder_blocks: c.encoder_blocks,
            decoder_blocks: c.decoder_blocks,
            heads: c.heads,
            time_dim: c.time_dim,
            velocity_width: c.velocity_width,
            velocity_blocks: c.velocity_blocks,
        };
        let decoder = Decoder::new(&mut params, dims, &mut rng)?;
        Ok(Self {
            config,
            params,
            vocab,
            codebook,
            encoder,
            resampler,
            generator,
            decoder,
        })
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        let c = &self.config;
        if (img.height, img.width, img.channels) != (c.image_size, c.image_size, c.channels) {
            return Err(Error::shape(
                "tokenizer",
                format!(
                    "image is {}x{}x{}, model expects {s}x{s}x{}",
                    img.height,
                    img.width,
                    img.channels,
                    c.channels,
                    s = c.image_size
                ),
            ));
        }
        Ok(())
    }

    /// Gumbel logits `G(z_1D)` for one image, `[n, N_l]`.
    pub fn logits(&self, g: &mut Graph<E>, p: &Bound, img: &Image) -> Result<Var> {
        self.check_image(img)?;
        let pixels: Vec<f64> = to_model_space(&img.data).collect();
        let x = g.constant(Tensor::from_f64(&[img.height * img.width, img.channels], &pixels)?);
        let grid = self.encoder.forward(g, p, x)?;
        let seq = self.resampler.forward(g, p, grid)?;
        self.generator.forward(g, p, seq)
    }

    /// Encode one image. `noise` supplies Gumbel samples; `None` is the
    /// deterministic evaluation mode.
    pub fn encode(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        img: &Image,
        noise: Option<Tensor<E>>,
        tau: f64,
    ) -> Result<Encoded> {
        let logits = self.logits(g, p, img)?;
        let alpha = gumbel_alpha(g, logits, noise, tau)?;
        let table = g.constant(self.vocab.table().clone());
        let v = embed_vocab(g, alpha, table)?;
        let codes = if self.config.soft_forward {
            v
        } else {
            let q = self.codebook.quantize(g.value(v))?;
            g.straight_through(v, q.codes)?
        };
        Ok(Encoded { v, codes })
    }

    /// Deterministic tokenization: zero noise, temperature at its floor.
    pub fn tokenize(&self, img: &Image) -> Result<TokenSequence<E>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let logits = self.logits(&mut g, &p, img)?;
        let alpha = gumbel_alpha(&mut g, logits, None, self.config.tau_end)?;
        let table = g.constant(self.vocab.table().clone());
        let v = embed_vocab(&mut g, alpha, table)?;
        self.codebook.quantize(g.value(v))
    }

    /// Training loss over a batch. Every random choice (Gumbel noise, masks,
    /// path times, noise, guidance dropout) is drawn from `rng`.
    pub fn loss(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        batch: &[Image],
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<LossParts<E>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let c = &self.config;
        let n_patches = c.patches();
        let mut conds = Vec::with_capacity(batch.len());
        let mut clean = Vec::new();
        let mut v_all = Vec::with_capacity(batch.len());
        let mut code_rows = Vec::new();
        for img in batch {
            let noise = Tensor::new(&[c.tokens, c.vocab_size], gumbel_noise(c.tokens * c.vocab_size, rng))?;
            let enc = self.encode(g, p, img, Some(noise), tau)?;
            let mask = sample_mask(n_patches, rng)?;
            let cond = self.condition(g, p, img, enc.codes, &mask)?;
            let Some(cond) = cond else {
                return Err(Error::Contract("training mask selected no patches".into()));
            };
            conds.push(cond);
            let patches = patchify(img, c.patch)?;
            for &m in &mask.masked {
                clean.extend(to_model_space(&patches.patches[m]));
            }
            v_all.push(enc.v);
            code_rows.push(enc.codes);
        }
        let cond = g.concat_rows(&conds)?;
        let rows = g.value(cond).rows();
        let cond = self.apply_guidance_dropout(g, p, cond, rows, rng)?;
        let z = Tensor::from_f64(&[rows, self.decoder.dims.patch_dim], &clean)?;
        let draw = FlowDraw::sample(&z, rng)?;
        let z_t = g.constant(draw.z_t.clone());
        let pred = self.decoder.head.forward(g, p, z_t, &draw.t, cond)?;
        let fm = fm_loss(g, pred, &draw)?;

        let v = g.concat_rows(&v_all)?;
        let v_rows = g.value(v).clone();
        let q = self.codebook.quantize(&v_rows)?;
        let (loss, commit) = if c.commitment > 0.0 {
            let target = g.constant(q.codes);
            let commit = g.mse(v, target)?;
            let scaled = g.scale(commit, E::from_f64(c.commitment))?;
            (g.add(fm, scaled)?, Some(commit))
        } else {
            (fm, None)
        };
        Ok(LossParts {
            loss,
            fm,
            commit,
            v_rows,
            assignments: q.indices,
        })
    }

    /// Condition embeddings for the masked patches of `img` given token codes.
    pub fn condition(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        img: &Image,
        codes: Var,
        mask: &MaskState,
    ) -> Result<Option<Var>> {
        let tok = self.decoder.embed_tokens(g, p, codes)?;
        let revealed = if mask.revealed.is_empty() {
            None
        } else {
            let patches = patchify(img, self.config.patch)?;
            let vals: Vec<f64> = mask
                .revealed
                .iter()
                .flat_map(|&i| to_model_space(&patches.patches[i]))
                .collect();
            Some(g.constant(Tensor::from_f64(
                &[mask.revealed.len(), self.decoder.dims.patch_dim],
                &vals,
            )?))
        };
        let ctx = self.decoder.encode_context(g, p, tok, &mask.revealed, revealed)?;
        self.decoder.decode_mask(g, p, ctx, &mask.masked)
    }

    /// Swap a `cfg_dropout` fraction of condition rows for the dummy embedding.
    fn apply_guidance_dropout(
        &self,
        g: &mut Graph<E>,
        p: &Bound,
        cond: Var,
        rows: usize,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let rate = self.config.cfg_dropout;
        if rate <= 0.0 {
            return Ok(cond);
        }
        let dummy = self.decoder.dummy_rows(g, p, 1)?;
        let pool = g.concat_rows(&[cond, dummy])?;
        let pick: Vec<usize> = (0..rows)
            .map(|r| if rng.random::<f64>() < rate { rows } else { r })
            .collect();
        g.gather_rows(pool, &pick)
    }
}

/// Diagnostics from one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub fm: f64,
    pub commit: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub restarted: usize,
}

/// Owns the optimizer and schedules for training a [`Tokenizer`].
#[derive(Debug, Clone)]
pub struct Trainer<E = f32> {
    pub model: Tokenizer<E>,
    adam: Adam<E>,
    lr: LrSchedule,
    tau: TauSchedule,
    rng: ChaCha8Rng,
    step: u64,
}

impl<E: Element> Trainer<E> {
    pub fn new(model: Tokenizer<E>) -> Self {
        let c = &model.config;
        let adam = Adam::new(
            AdamConfig {
                lr: c.lr,
                beta1: c.adam_beta1,
                beta2: c.adam_beta2,
                eps: 1e-8,
                clip_norm: c.clip_norm,
            },
            &model.params,
        );
        let lr = LrSchedule {
            base_lr: c.lr,
            total_steps: c.train_steps,
            warmup_frac: c.warmup_frac,
        };
        let tau = TauSchedule {
            start: c.tau_start,
            end: c.tau_end,
            steps: c.tau_anneal_steps,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(STREAM_TRAIN);
        Self {
            model,
            adam,
            lr,
            tau,
            rng,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam step on the flow loss plus one EMA update of the codebook.
    pub fn train_step(&mut self, batch: &[Image]) -> Result<StepReport> {
        let tau = self.tau.tau(self.step);
        let lr = self.lr.lr(self.step);
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let parts = self.model.loss(&mut g, &p, batch, tau, &mut self.rng)?;
        let loss = g.value(parts.loss).data()[0].to_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        g.backward(parts.loss)?;
        let grads = self.model.params.grads(&g, &p);
        let grad_norm = self.adam.step(&mut self.model.params, &grads, lr)?;
        self.model.codebook.ema_update(&parts.v_rows, &parts.assignments)?;
        let restarted = match self.model.config.dead_code_threshold {
            t if t > 0.0 => self.model.codebook.restart_dead(t, &parts.v_rows, &mut self.rng),
            _ => 0,
        };
        let report = StepReport {
            step: self.step,
            loss,
            fm: g.value(parts.fm).data()[0].to_f64(),
            commit: parts.commit.map_or(0.0, |c| g.value(c).data()[0].to_f64()),
            lr,
            tau,
            grad_norm,
            restarted,
        };
        self.step += 1;
        Ok(report)
    }

    /// Run `config.train_steps` steps, drawing batches with replacement.
    pub fn fit(&mut self, data: &[Image], mut log: impl FnMut(&StepReport)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let bs = self.model.config.batch_size;
        while self.step < self.model.config.train_steps {
            let batch: Vec<Image> = (0..bs)
                .map(|_| data[self.rng.random_range(0..data.len())].clone())
                .collect();
            let report = self.train_step(&batch)?;
            log(&report);
        }
        Ok(())
    }

    pub fn into_model(self) -> Tokenizer<E> {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> Config {
        Config {
            image_size: 16,
            patch: 8,
            downsample: 4,
            tokens: 2,
            latent_dim: 8,
            vocab_size: 12,
            vocab_dim: 4,
            codebook_size: 6,
            resampler_heads: 2,
            model_width: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            heads: 2,
            time_dim: 4,
            velocity_width: 16,
            batch_size: 2,
            ar_steps: 2,
            prior_context: 8,
            ..Config::default()
        }
    }

    fn toy_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
        Image::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn tokenize_is_deterministic() {
        let tok = Tokenizer::<f32>::new(toy_config()).unwrap();
        let img = toy_image(1);
        let a = tok.tokenize(&img).unwrap();
        assert_eq!(a, tok.tokenize(&img).unwrap());
        assert_eq!(a.len(), 2);
        assert_eq!(a.codes, tok.codebook.lookup(&a.indices).unwrap());
    }

    #[test]
    fn zero_lr_changes_only_codebook() {
        let mut cfg = toy_config();
        cfg.lr = 0.0;
        let mut tr = Trainer::new(Tokenizer::<f32>::new(cfg).unwrap());
        let before = tr.model.params.clone();
        let r = tr.train_step(&[toy_image(1), toy_image(2)]).unwrap();
        assert!(r.loss.is_finite());
        assert_eq!(tr.model.params, before);
    }

    #[test]
    fn same_seed_same_parameters() {
        let run = || {
            let mut tr = Trainer::new(Tokenizer::<f32>::new(toy_config()).unwrap());
            for _ in 0..3 {
                tr.train_step(&[toy_image(1), toy_image(2)]).unwrap();
            }
            tr.into_model()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.codebook, b.codebook);
    }

    #[test]
    fn wrong_image_size_is_shape_error() {
        let tok = Tokenizer::<f32>::new(toy_config()).unwrap();
        let img = Image::filled(8, 8, 3, 0.5);
        assert!(matches!(tok.tokenize(&img), Err(Error::Shape { .. })));
    }
}
