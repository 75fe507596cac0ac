//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "V2FL" | version | config_len | config text (UTF-8)
//! | entry_count | entries... | crc32 of every preceding byte
//! entry: name_len | name | rank | dims[rank] | f32 payload
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::prior::Prior;
use crate::resampler::{Codebook, VocabTable};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 4] = b"V2FL";
pub const VERSION: u32 = 1;

const VOCAB_TABLE: &str = "vocab.table";
const EMA_COUNTS: &str = "codebook.ema_counts";
const EMA_SUMS: &str = "codebook.ema_sums";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(config: Config) -> Self {
        Self {
            config,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let text = self.config.to_text();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.dims().len() as u32);
            for &d in t.dims() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "file too short for a checksum".into(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let len = r.u32()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Parse {
            offset: at + e.valid_up_to(),
            msg: "config snapshot is not UTF-8".into(),
        })?;
        let config = Config::parse(text)?;
        let count = r.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Parse {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let at = r.pos;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse {
                offset: at,
                msg: "tensor size overflows".into(),
            })?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Parse {
                offset: at,
                msg: format!("tensor `{name}`: {e}"),
            })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("duplicate tensor `{name}`"),
                });
            }
        }
        if r.pos != body.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: "trailing bytes before checksum".into(),
            });
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Tokenizer<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.clone());
        ck.insert(VOCAB_TABLE, self.vocab.table().clone());
        let counts = self.codebook.ema_counts().to_vec();
        ck.insert(
            EMA_COUNTS,
            Tensor::new(&[counts.len()], counts).expect("non-empty codebook"),
        );
        ck.insert(EMA_SUMS, self.codebook.ema_sums().clone());
        for (name, t) in self.params.iter() {
            ck.insert(name, t.clone());
        }
        ck
    }

    /// Rebuild a tokenizer; architecture keys of `live` must match the
    /// stored configuration. Other keys come from `live`.
    pub fn from_checkpoint(ck: &Checkpoint, live: &Config) -> Result<Self> {
        live.check_arch(&ck.config)?;
        let mut model = Tokenizer::new(live.clone())?;
        model.vocab = VocabTable::from_tensor(ck.get(VOCAB_TABLE)?.clone())?;
        model.codebook = Codebook::from_state(
            ck.get(EMA_COUNTS)?.data().to_vec(),
            ck.get(EMA_SUMS)?.clone(),
            live.ema_decay,
            live.laplace_eps,
        )?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            model.params.set(&name, ck.get(&name)?.clone())?;
        }
        Ok(model)
    }
}

impl Prior<f32> {
    pub fn to_checkpoint(&self, config: &Config) -> Checkpoint {
        let mut ck = Checkpoint::new(config.clone());
        for (name, t) in self.params.iter() {
            ck.insert(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, live: &Config, codebook: &Codebook<f32>) -> Result<Self> {
        live.check_arch(&ck.config)?;
        let mut prior = Prior::new(live, codebook)?;
        let names: Vec<String> = prior.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            prior.params.set(&name, ck.get(&name)?.clone())?;
        }
        Ok(prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(Config::default());
        ck.insert(
            "a",
            Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, f64::from(f32::MIN_POSITIVE), 0.0, -0.0]).unwrap(),
        );
        ck.insert("b.c", Tensor::scalar(7.0));
        ck
    }

    #[test]
    fn roundtrip_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (k, t) in &ck.tensors {
            let u = &back.tensors[k];
            assert_eq!(t.dims(), u.dims());
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn distinct_failures() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Crc { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::Version { found: 2, .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"PNG\0...."), Err(Error::BadMagic)));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
