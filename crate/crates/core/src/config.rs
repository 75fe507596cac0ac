//! Flat `key=value` configuration shared by every stage of the pipeline.
//!
//! One line per entry, `#` starts a comment. Unknown keys are errors. Keys
//! marked as architecture keys must agree between a checkpoint and the live
//! configuration it is loaded into.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// ODE route used when reconstructing patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMethod {
    RectifiedFlow,
    Ddim,
}

impl FromStr for SamplerMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rectified_flow" | "rf" => Ok(Self::RectifiedFlow),
            "ddim" => Ok(Self::Ddim),
            _ => Err(format!("unknown sampler `{s}` (expected rectified_flow or ddim)")),
        }
    }
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RectifiedFlow => "rectified_flow",
            Self::Ddim => "ddim",
        })
    }
}

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr, $arch:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl Config {
            /// Every key in declaration order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key), )*];

            /// Whether `key` fixes tensor shapes.
            pub fn is_arch_key(key: &str) -> bool {
                match key {
                    $( stringify!($key) => $arch, )*
                    _ => false,
                }
            }

            /// Parse and assign one entry.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = value.trim().parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value `{value}` for `{key}`: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($key) => Some(self.$key.to_string()), )*
                    _ => None,
                }
            }
        }
    };
}

config! {
    seed: u64 = 0, false;

    /// Square image side in pixels.
    image_size: usize = 32, true;
    channels: usize = 3, true;
    patch: usize = 8, true;
    /// Spatial downsampling factor of the convolutional encoder.
    downsample: usize = 8, true;
    tokens: usize = 16, true;
    latent_dim: usize = 128, true;
    vocab_size: usize = 1024, true;
    vocab_dim: usize = 64, true;
    codebook_size: usize = 512, true;
    resampler_heads: usize = 4, true;

    model_width: usize = 128, true;
    encoder_blocks: usize = 4, true;
    decoder_blocks: usize = 4, true;
    heads: usize = 4, true;
    time_dim: usize = 64, true;
    velocity_width: usize = 512, true;
    velocity_blocks: usize = 2, true;

    ema_decay: f64 = 0.99, false;
    laplace_eps: f64 = 1e-5, false;
    /// Codes whose EMA count drops below this are re-seeded; `0` disables.
    dead_code_threshold: f64 = 1.0, false;
    tau_start: f64 = 1.0, false;
    tau_end: f64 = 0.1, false;
    tau_anneal_steps: u64 = 2000, false;
    commitment: f64 = 0.25, false;
    /// Feed the decoder soft embeddings instead of quantized codes.
    soft_forward: bool = false, false;
    cfg_dropout: f64 = 0.1, false;

    lr: f64 = 1e-3, false;
    adam_beta1: f64 = 0.9, false;
    adam_beta2: f64 = 0.999, false;
    warmup_frac: f64 = 0.03, false;
    clip_norm: f64 = 1.0, false;
    train_steps: u64 = 2000, false;
    batch_size: usize = 16, false;

    ar_steps: usize = 8, false;
    ode_steps: usize = 25, false;
    cfg_scale: f64 = 1.5, false;
    sampler: SamplerMethod = SamplerMethod::RectifiedFlow, false;

    num_classes: usize = 4, true;
    prior_width: usize = 128, true;
    prior_blocks: usize = 4, true;
    prior_heads: usize = 4, true;
    prior_context: usize = 64, true;
    prior_steps: u64 = 500, false;
    prior_lr: f64 = 1e-3, false;
    prior_batch: usize = 16, false;
    prior_freeze_visual: bool = false, false;
    temperature: f64 = 1.0, false;

    synth_count: usize = 2000, false;
}

impl Config {
    pub fn arch_keys() -> impl Iterator<Item = &'static str> {
        Self::KEYS.iter().copied().filter(|k| Self::is_arch_key(k))
    }

    /// Parse `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, declaration order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("tokens", self.tokens),
            ("latent_dim", self.latent_dim),
            ("vocab_size", self.vocab_size),
            ("vocab_dim", self.vocab_dim),
            ("codebook_size", self.codebook_size),
            ("model_width", self.model_width),
            ("heads", self.heads),
            ("resampler_heads", self.resampler_heads),
            ("velocity_width", self.velocity_width),
            ("batch_size", self.batch_size),
            ("ar_steps", self.ar_steps),
            ("ode_steps", self.ode_steps),
            ("num_classes", self.num_classes),
            ("prior_width", self.prior_width),
            ("prior_heads", self.prior_heads),
            ("prior_context", self.prior_context),
            ("prior_batch", self.prior_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return fail(format!("`{k}` must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.downsample < 2 || !self.downsample.is_power_of_two() || !self.image_size.is_multiple_of(self.downsample)
        {
            return fail(format!(
                "downsample {} must be a power of two >= 2 dividing image_size",
                self.downsample
            ));
        }
        let cells = (self.image_size / self.downsample).pow(2);
        if self.tokens > cells {
            return fail(format!("tokens {} exceeds latent grid cells {cells}", self.tokens));
        }
        let patches = (self.image_size / self.patch).pow(2);
        if self.ar_steps > patches {
            return fail(format!("ar_steps {} exceeds patch count {patches}", self.ar_steps));
        }
        if self.codebook_size > self.vocab_size {
            return fail("codebook_size cannot exceed vocab_size (codes start as distinct vocabulary rows)".into());
        }
        for (k, w, h) in [
            ("model_width", self.model_width, self.heads),
            ("latent_dim", self.latent_dim, self.resampler_heads),
            ("prior_width", self.prior_width, self.prior_heads),
        ] {
            if w % h != 0 {
                return fail(format!("`{k}` {w} is not divisible by its head count {h}"));
            }
        }
        if !self.model_width.is_multiple_of(4) || !self.time_dim.is_multiple_of(2) || self.time_dim == 0 {
            return fail("model_width must be divisible by 4 and time_dim even and positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.laplace_eps > 0.0) {
            return fail("laplace_eps must be positive".into());
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return fail("Gumbel temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) || !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("cfg_dropout and warmup_frac must be fractions".into());
        }
        if !(self.lr >= 0.0 && self.prior_lr >= 0.0 && self.commitment >= 0.0 && self.clip_norm >= 0.0) {
            return fail("learning rates, commitment and clip_norm must be non-negative".into());
        }
        if !(self.temperature >= 0.0) {
            return fail("temperature must be >= 0".into());
        }
        if self.prior_context < self.tokens + 3 {
            return fail(format!(
                "prior_context {} too short for {} tokens",
                self.prior_context, self.tokens
            ));
        }
        Ok(())
    }

    /// Refuse a stored configuration whose architecture differs from `self`.
    pub fn check_arch(&self, stored: &Config) -> Result<()> {
        for key in Self::arch_keys() {
            let (a, b) = (stored.get(key), self.get(key));
            if a != b {
                return Err(Error::ArchMismatch {
                    key: key.to_string(),
                    stored: a.unwrap_or_default(),
                    live: b.unwrap_or_default(),
                });
            }
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = Config::parse("# hi\ntokens = 8 # fewer\n\nsampler=ddim\n").unwrap();
        assert_eq!(c.tokens, 8);
        assert_eq!(c.sampler, SamplerMethod::Ddim);
        assert!(matches!(Config::parse("bogus=1"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("tokens"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("tokens=x"), Err(Error::Config(_))));
    }

    #[test]
    fn arch_mismatch_names_key() {
        let live = Config::default();
        let mut stored = live.clone();
        stored.lr = 5.0;
        live.check_arch(&stored).unwrap();
        stored.tokens = 8;
        match live.check_arch(&stored) {
            Err(Error::ArchMismatch { key, .. }) => assert_eq!(key, "tokens"),
            other => panic!("{other:?}"),
        }
        assert!(Config::arch_keys().all(|k| k != "seed"));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = Config::default();
        c.tokens = 17;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.model_width = 130;
        assert!(c.validate().is_err());
    }
}
