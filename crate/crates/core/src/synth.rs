//! Procedural shape images for desk-scale training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Disk,
    Rectangle,
    Gradient,
    Stripe,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Disk, Family::Rectangle, Family::Gradient, Family::Stripe];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Disk => "disk",
            Family::Rectangle => "rectangle",
            Family::Gradient => "gradient",
            Family::Stripe => "stripe",
        }
    }
}

/// Parameters of a synthetic corpus. Sample `i` has class `i % families`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    pub families: Vec<Family>,
    /// Disk radius as a fraction of the side.
    pub radius: (f64, f64),
    /// Rectangle side as a fraction of the side.
    pub extent: (f64, f64),
    /// Stripe period in pixels.
    pub period: (usize, usize),
}

impl SynthSpec {
    pub fn new(size: usize, count: usize, seed: u64) -> Self {
        Self {
            size,
            count,
            seed,
            families: Family::ALL.to_vec(),
            radius: (0.15, 0.4),
            extent: (0.25, 0.7),
            period: (8, 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class: usize,
    /// Background color, for families that have one.
    pub background: [f32; 3],
}

pub fn synth_dataset(spec: &SynthSpec) -> Vec<Sample> {
    (0..spec.count).map(|i| synth_sample(spec, i)).collect()
}

/// Sample `index` of the corpus; independent of every other index.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let family = spec.families[index % spec.families.len()];
    let s = spec.size;
    let sf = s as f64;
    let bg = color(&mut rng);
    let fg = color(&mut rng);
    let mut img = Image::new(s, s, 3, bg.repeat(s * s)).expect("consistent size");
    match family {
        Family::Disk => {
            let r = rng.random_range(spec.radius.0..=spec.radius.1) * sf;
            let cy = rng.random_range(r..=sf - r);
            let cx = rng.random_range(r..=sf - r);
            paint(&mut img, fg, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
        }
        Family::Rectangle => {
            let h = rng.random_range(spec.extent.0..=spec.extent.1) * sf;
            let w = rng.random_range(spec.extent.0..=spec.extent.1) * sf;
            let y0 = rng.random_range(0.0..=sf - h);
            let x0 = rng.random_range(0.0..=sf - w);
            paint(&mut img, fg, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w);
        }
        Family::Gradient => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let u = ((y as f64 + 0.5) / sf - 0.5) * dy + ((x as f64 + 0.5) / sf - 0.5) * dx;
                    let a = (u / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0) as f32;
                    for c in 0..3 {
                        img.set(y, x, c, bg[c] * (1.0 - a) + fg[c] * a);
                    }
                }
            }
        }
        Family::Stripe => {
            let period = rng.random_range(spec.period.0..=spec.period.1);
            let phase = rng.random_range(0..period);
            let vertical = rng.random_bool(0.5);
            paint(&mut img, fg, |y, x| {
                let k = (if vertical { x } else { y }) as usize + phase;
                k % period < period / 2
            });
        }
    }
    Sample {
        image: img,
        class: family.class(),
        background: [bg[0], bg[1], bg[2]],
    }
}

fn color(rng: &mut impl Rng) -> Vec<f32> {
    (0..3).map(|_| rng.random::<f32>()).collect()
}

/// Set every pixel whose center satisfies `inside` to `fg`.
fn paint(img: &mut Image, fg: Vec<f32>, inside: impl Fn(f64, f64) -> bool) {
    for y in 0..img.height {
        for x in 0..img.width {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                for (c, &v) in fg.iter().enumerate() {
                    img.set(y, x, c, v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SynthSpec::new(32, 40, 5);
        let a = synth_dataset(&spec);
        assert_eq!(a, synth_dataset(&spec));
        for c in 0..4 {
            assert_eq!(a.iter().filter(|s| s.class == c).count(), 10);
        }
        assert!(a.iter().all(|s| s.image.in_unit_range()));
    }

    #[test]
    fn disk_outside_is_background() {
        let spec = SynthSpec::new(32, 1, 9);
        let s = synth_sample(&spec, 0);
        assert_eq!(s.class, 0);
        // Corners lie outside any disk that fits in the frame.
        for (y, x) in [(0, 0), (0, 31), (31, 0), (31, 31)] {
            for c in 0..3 {
                assert_eq!(s.image.at(y, x, c), s.background[c]);
            }
        }
    }
}
