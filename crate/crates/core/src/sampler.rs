//! Reconstruction: cosine reveal schedule, guided velocity, ODE integration,
//! and the masked autoregressive loop that rebuilds an image from tokens.

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{Config, SamplerMethod};
use crate::decoder::unpatchify;
use crate::decoder::{from_model_space, PatchSet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::resampler::TokenSequence;
use crate::tensor::{Element, Tensor};
use crate::tokenizer::Tokenizer;

/// Number of patches revealed at each AR iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub reveal_counts: Vec<usize>,
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.reveal_counts.iter().sum()
    }
}

/// Masked counts `m_k = floor(N cos(pi k / 2K))`, reveals `m_{k-1} - m_k`.
/// A zero reveal is carried into the following step, so the result can be
/// shorter than `K`.
pub fn cosine_schedule(n: usize, k: usize) -> Result<Schedule> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("schedule needs 1 <= K <= N, got N={n} K={k}")));
    }
    let masked = |i: usize| -> usize {
        if i == 0 {
            return n;
        }
        if i == k {
            return 0;
        }
        let c = (std::f64::consts::PI * i as f64 / (2 * k) as f64).cos();
        ((n as f64 * c).floor() as usize).min(n)
    };
    let mut counts = Vec::with_capacity(k);
    let mut carry = 0;
    for i in 1..=k {
        let r = masked(i - 1) - masked(i) + carry;
        if r == 0 {
            continue;
        }
        carry = 0;
        counts.push(r);
    }
    debug_assert_eq!(carry, 0);
    Ok(Schedule { reveal_counts: counts })
}

/// Guided velocity `omega v + (1 - omega) u`.
pub fn cfg_velocity<E: Element>(v: &[E], u: &[E], omega: f64) -> Result<Vec<E>> {
    if v.len() != u.len() {
        return Err(Error::shape(
            "cfg_velocity",
            "conditional and unconditional differ in length",
        ));
    }
    if omega == 1.0 {
        return Ok(v.to_vec());
    }
    if omega == 0.0 {
        return Ok(u.to_vec());
    }
    let (a, b) = (E::from_f64(omega), E::from_f64(1.0 - omega));
    Ok(v.iter().zip(u).map(|(&x, &y)| a * x + b * y).collect())
}

/// Euler integration of `dz/dt = field(z, t)` from `t = 1` to `t = 0`:
/// `z <- z - dt * field(z, t)`.
pub fn integrate_rf<E: Element>(
    z_init: &Tensor<E>,
    steps: usize,
    mut field: impl FnMut(&Tensor<E>, f64) -> Result<Tensor<E>>,
) -> Result<Tensor<E>> {
    if steps == 0 {
        return Err(Error::Config("ode_steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_init.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let psi = field(&z, t)?;
        check_field(&z, &psi)?;
        let h = E::from_f64(dt);
        for (zi, &p) in z.data_mut().iter_mut().zip(psi.data()) {
            *zi = *zi - h * p;
        }
    }
    Ok(z)
}

/// Deterministic DDIM over the same time grid. The velocity head is read as
/// `x0 = z - t psi` and `eps = z + (1 - t) psi`; the next state re-noises
/// `x0` with `eps` at the earlier time.
pub fn integrate_ddim<E: Element>(
    z_init: &Tensor<E>,
    steps: usize,
    mut field: impl FnMut(&Tensor<E>, f64) -> Result<Tensor<E>>,
) -> Result<Tensor<E>> {
    if steps == 0 {
        return Err(Error::Config("ode_steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_init.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let s = if i + 1 == steps { 0.0 } else { t - dt };
        let psi = field(&z, t)?;
        check_field(&z, &psi)?;
        let (t_e, s_e, one) = (E::from_f64(t), E::from_f64(s), E::one());
        for (zi, &p) in z.data_mut().iter_mut().zip(psi.data()) {
            let x0 = *zi - t_e * p;
            let eps = *zi + (one - t_e) * p;
            *zi = (one - s_e) * x0 + s_e * eps;
        }
    }
    Ok(z)
}

fn check_field<E: Element>(z: &Tensor<E>, psi: &Tensor<E>) -> Result<()> {
    if z.dims() != psi.dims() {
        return Err(Error::shape(
            "integrate",
            format!("field {:?} for state {:?}", psi.dims(), z.dims()),
        ));
    }
    if !psi.is_finite() {
        return Err(Error::NonFinite { op: "velocity" });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub ar_steps: usize,
    pub ode_steps: usize,
    pub omega: f64,
    pub method: SamplerMethod,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn from_config(c: &Config) -> Self {
        Self {
            ar_steps: c.ar_steps,
            ode_steps: c.ode_steps,
            omega: c.cfg_scale,
            method: c.sampler,
            seed: c.seed,
        }
    }
}

/// Initial noise for one patch. Each patch owns a ChaCha stream, so the draw
/// does not depend on reveal order.
pub fn patch_noise<E: Element>(seed: u64, patch: usize, dim: usize) -> Vec<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + patch as u64);
    (0..dim).map(|_| E::from_f64(rng.sample(StandardNormal))).collect()
}

/// Result of [`ar_reconstruct_traced`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Image,
    /// Patch indices integrated at each AR iteration, sorted.
    pub steps: Vec<Vec<usize>>,
}

pub fn ar_reconstruct<E: Element>(
    model: &Tokenizer<E>,
    tokens: &TokenSequence<E>,
    cfg: &SamplerConfig,
) -> Result<Image> {
    Ok(ar_reconstruct_traced(model, tokens, cfg)?.image)
}

/// Rebuild an image from tokens over `K` reveal iterations.
pub fn ar_reconstruct_traced<E: Element>(
    model: &Tokenizer<E>,
    tokens: &TokenSequence<E>,
    cfg: &SamplerConfig,
) -> Result<Reconstruction> {
    let c = &model.config;
    let dec = &model.decoder;
    if tokens.len() != c.tokens || tokens.codes.dims() != [c.tokens, c.vocab_dim] {
        return Err(Error::Config(format!(
            "token sequence of length {} does not fit a model with {} tokens of dim {}",
            tokens.len(),
            c.tokens,
            c.vocab_dim
        )));
    }
    let n = dec.num_patches();
    let pd = dec.dims.patch_dim;
    let schedule = cosine_schedule(n, cfg.ar_steps)?;
    let mut select = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let codes = g.constant(tokens.codes.clone());
    let tok = dec.embed_tokens(&mut g, &p, codes)?;
    let dummy = dec.dummy_rows(&mut g, &p, 1)?;
    let dummy = g.value(dummy).clone();

    let mut done: Vec<Option<Vec<E>>> = vec![None; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(schedule.reveal_counts.len());
    for &count in &schedule.reveal_counts {
        let revealed: Vec<usize> = (0..n).filter(|&i| done[i].is_some()).collect();
        let rp = if revealed.is_empty() {
            None
        } else {
            let vals: Vec<E> = revealed
                .iter()
                .flat_map(|&i| done[i].clone().unwrap_or_default())
                .collect();
            Some(g.constant(Tensor::new(&[revealed.len(), pd], vals)?))
        };
        let ctx = dec.encode_context(&mut g, &p, tok, &revealed, rp)?;
        let cond = dec
            .decode_mask(&mut g, &p, ctx, &remaining)?
            .ok_or_else(|| Error::Contract("no masked patches left to decode".into()))?;

        let mut chosen = sample(&mut select, remaining.len(), count).into_vec();
        chosen.sort_unstable();
        let cond_vals = g.value(cond).clone();
        let mut cond_rows = Vec::with_capacity(count * dec.dims.width);
        let mut z0 = Vec::with_capacity(count * pd);
        for &j in &chosen {
            cond_rows.extend_from_slice(cond_vals.row(j));
            z0.extend(patch_noise::<E>(cfg.seed, remaining[j], pd));
        }
        let cond_t = Tensor::new(&[count, dec.dims.width], cond_rows)?;
        let unc_t = Tensor::new(&[count, dec.dims.width], dummy.data().repeat(count))?;
        let z0 = Tensor::new(&[count, pd], z0)?;

        let mut field = |z: &Tensor<E>, t: f64| -> Result<Tensor<E>> {
            let times = vec![t; count];
            let zv = g.constant(z.clone());
            let cv = g.constant(cond_t.clone());
            let v = dec.head.forward(&mut g, &p, zv, &times, cv)?;
            let v = g.value(v).clone();
            if cfg.omega == 1.0 {
                return Ok(v);
            }
            let uv = g.constant(unc_t.clone());
            let u = dec.head.forward(&mut g, &p, zv, &times, uv)?;
            Tensor::new(v.dims(), cfg_velocity(v.data(), g.value(u).data(), cfg.omega)?)
        };
        let out = match cfg.method {
            SamplerMethod::RectifiedFlow => integrate_rf(&z0, cfg.ode_steps, &mut field)?,
            SamplerMethod::Ddim => integrate_ddim(&z0, cfg.ode_steps, &mut field)?,
        };

        let mut ids: Vec<usize> = chosen.iter().map(|&j| remaining[j]).collect();
        for (r, &id) in ids.iter().enumerate() {
            done[id] = Some(out.row(r).to_vec());
        }
        ids.sort_unstable();
        remaining.retain(|i| ids.binary_search(i).is_err());
        steps.push(ids);
    }

    let side = (c.image_size / c.patch, c.image_size / c.patch);
    let patches = done
        .into_iter()
        .map(|v| {
            v.ok_or_else(|| Error::Contract("a patch was never reconstructed".into()))
                .map(|v| v.into_iter().map(|x| from_model_space(x.to_f64())).collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    let mut image = unpatchify(&PatchSet {
        patch: c.patch,
        channels: c.channels,
        rows: side.0,
        cols: side.1,
        patches,
    })?;
    image.clamp_unit();
    Ok(Reconstruction { image, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_schedule(16, 4).unwrap().reveal_counts, vec![2, 3, 5, 6]);
        assert_eq!(cosine_schedule(7, 1).unwrap().reveal_counts, vec![7]);
        assert!(matches!(cosine_schedule(3, 4), Err(Error::Config(_))));
        assert!(matches!(cosine_schedule(3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_merges_zero_reveals() {
        let s = cosine_schedule(4, 4).unwrap();
        assert_eq!(s.total(), 4);
        assert!(s.reveal_counts.iter().all(|&r| r > 0));
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_velocity(&[1.0f64], &[0.5], 2.0).unwrap(), vec![1.5]);
        assert_eq!(cfg_velocity(&[0.3f32], &[9.0], 1.0).unwrap(), vec![0.3]);
        assert_eq!(cfg_velocity(&[0.3f32], &[9.0], 0.0).unwrap(), vec![9.0]);
    }

    #[test]
    fn one_step_ddim_with_exact_noise_recovers_data() {
        let z = Tensor::<f64>::from_f64(&[1, 3], &[0.2, -0.4, 0.9]).unwrap();
        let eps = Tensor::<f64>::from_f64(&[1, 3], &[1.1, 0.3, -2.0]).unwrap();
        let target = Tensor::new(&[1, 3], eps.data().iter().zip(z.data()).map(|(e, x)| e - x).collect()).unwrap();
        let out = integrate_ddim(&eps, 1, |_, _| Ok(target.clone())).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn zero_steps_rejected() {
        let z = Tensor::<f64>::zeros(&[1, 1]);
        assert!(matches!(
            integrate_rf(&z, 0, |z, _| Ok(z.clone())),
            Err(Error::Config(_))
        ));
    }
}
