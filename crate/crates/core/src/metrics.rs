//! PSNR and windowed SSIM.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

fn check(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height, a.width, a.channels, b.height, b.width, b.channels
            ),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b, "mse")?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Luminance, contrast and structure factors of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowTerms {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

impl WindowTerms {
    /// Equals the usual two-factor SSIM when `c3 = c2 / 2`.
    pub fn ssim(&self) -> f64 {
        self.luminance * self.contrast * self.structure
    }
}

/// SSIM terms for the `k x k` window at `(y, x)` of one channel. Variances
/// use the population (divide by `k*k`) convention.
pub fn window_terms(a: &Image, b: &Image, y: usize, x: usize, channel: usize, k: usize, peak: f64) -> WindowTerms {
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let c3 = c2 / 2.0;
    let n = (k * k) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for dy in 0..k {
        for dx in 0..k {
            sa += a.at(y + dy, x + dx, channel) as f64;
            sb += b.at(y + dy, x + dx, channel) as f64;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for dy in 0..k {
        for dx in 0..k {
            let da = a.at(y + dy, x + dx, channel) as f64 - ma;
            let db = b.at(y + dy, x + dx, channel) as f64 - mb;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
    let (sda, sdb) = (vaa.sqrt(), vbb.sqrt());
    WindowTerms {
        luminance: (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1),
        contrast: (2.0 * sda * sdb + c2) / (vaa + vbb + c2),
        structure: (vab + c3) / (sda * sdb + c3),
    }
}

/// Mean SSIM over all `8 x 8` windows at stride 1, averaged over channels.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check(a, b, "ssim")?;
    let k = SSIM_WINDOW;
    if a.height < k || a.width < k {
        return Err(Error::Config(format!(
            "image {}x{} is smaller than the {k}x{k} SSIM window",
            a.height, a.width
        )));
    }
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        for y in 0..=a.height - k {
            for x in 0..=a.width - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let p = a.at(y + dy, x + dx, ch) as f64;
                        let q = b.at(y + dy, x + dx, ch) as f64;
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let vaa = (saa / n - ma * ma).max(0.0);
                let vbb = (sbb / n - mb * mb).max(0.0);
                let vab = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-image scores and their corpus means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub names: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricReport {
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a Image, &'a Image)>) -> Result<Self> {
        let mut r = Self {
            names: Vec::new(),
            psnr: Vec::new(),
            ssim: Vec::new(),
        };
        for (name, a, b) in pairs {
            r.psnr.push(psnr(a, b, 1.0)?);
            r.ssim.push(ssim(a, b, 1.0)?);
            r.names.push(name);
        }
        if r.names.is_empty() {
            return Err(Error::Contract("no image pairs to evaluate".into()));
        }
        Ok(r)
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    /// `key=value` records: one per image, then the means.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for ((n, p), q) in self.names.iter().zip(&self.psnr).zip(&self.ssim) {
            let _ = writeln!(s, "image={n} psnr_db={p:.6} ssim={q:.6}");
        }
        let _ = writeln!(s, "count={}", self.names.len());
        let _ = writeln!(s, "mean_psnr_db={:.6}", self.mean_psnr());
        let _ = writeln!(s, "mean_ssim={:.6}", self.mean_ssim());
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} images: PSNR {:.2} dB, SSIM {:.4}",
            self.names.len(),
            self.mean_psnr(),
            self.mean_ssim()
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let z = Image::filled(4, 4, 3, 0.0);
        let o = Image::filled(4, 4, 3, 1.0);
        let h = Image::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
        assert!((psnr(&z, &h, 1.0).unwrap() - 6.0206).abs() < 1e-3);
        assert!(psnr(&z, &Image::filled(4, 5, 3, 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_small_image() {
        let data = (0..16 * 16 * 3).map(|i| (i % 17) as f32 / 17.0).collect();
        let a = Image::new(16, 16, 3, data).unwrap();
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let small = Image::filled(4, 4, 3, 0.0);
        assert!(matches!(ssim(&small, &small, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn shift_lowers_luminance_only() {
        let data: Vec<f32> = (0..8 * 8).map(|i| (i % 5) as f32 / 10.0).collect();
        let a = Image::new(8, 8, 1, data.clone()).unwrap();
        let b = Image::new(8, 8, 1, data.iter().map(|v| v + 0.3).collect()).unwrap();
        let t = window_terms(&a, &b, 0, 0, 0, 8, 1.0);
        assert!(t.luminance < 1.0);
        assert!((t.structure - 1.0).abs() < 1e-6);
    }
}
