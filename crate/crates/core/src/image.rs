//! In-memory images and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// `height x width x channels` pixel grid, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image", "zero-sized image"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Encode as binary PPM with maxval 255.
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::shape(
                "ppm",
                format!("P6 needs 3 channels, image has {}", self.channels),
            ));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        Ok(out)
    }

    /// Decode binary PPM. Only maxval 255 is accepted.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut p = HeaderParser { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::Parse {
                offset: 0,
                msg: "missing P6 magic".into(),
            });
        }
        p.pos = 2;
        let (width, _) = p.number("width")?;
        let (height, _) = p.number("height")?;
        let (maxval, maxval_at) = p.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Parse {
                offset: maxval_at,
                msg: format!("maxval {maxval} unsupported, expected 255"),
            });
        }
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => {
                return Err(Error::Parse {
                    offset: p.pos,
                    msg: "expected a single whitespace byte after maxval".into(),
                })
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::Parse {
                offset: p.pos,
                msg: "zero image dimension".into(),
            });
        }
        let need = width * height * 3;
        let payload = &bytes[p.pos..];
        if payload.len() < need {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: format!("truncated payload: need {need} bytes, have {}", payload.len()),
            });
        }
        if payload.len() > need {
            return Err(Error::Parse {
                offset: p.pos + need,
                msg: "trailing bytes after payload".into(),
            });
        }
        let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(height, width, 3, data)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// Write via a temporary sibling file and rename.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_ppm()?)
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderParser<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Parse a decimal field; returns the value and its byte offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                msg: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_roundtrip() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff".to_vec();
        let img = Image::from_ppm(&bytes).unwrap();
        assert_eq!(img.data, vec![1.0; 3]);
        assert_eq!(img.to_ppm().unwrap(), bytes);
    }

    #[test]
    fn rejects_other_maxval() {
        let err = Image::from_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        match err {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 7);
                assert!(msg.contains("maxval"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let err = Image::from_ppm(b"P6\n2 1\n255\n\x01\x02\x03").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 14, .. }), "{err}");
    }

    #[test]
    fn ramp_decodes_to_byte_over_255() {
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend((0..48u8).map(|k| k * 5));
        let img = Image::from_ppm(&bytes).unwrap();
        for (k, &v) in img.data.iter().enumerate() {
            assert_eq!(v, (k as u8 * 5) as f32 / 255.0);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = Image::from_ppm(b"P6 # made by hand\n1 1 255\n\x00\x80\xff").unwrap();
        assert_eq!(img.data[1], 128.0 / 255.0);
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            Image::from_ppm(b"P3\n1 1\n255\n0 0 0"),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
