use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vocabflow::decoder::{make_path, patchify, unpatchify};
use vocabflow::graph::Graph;
use vocabflow::metrics::{psnr, ssim};
use vocabflow::resampler::{embed_vocab, gumbel_alpha, Codebook, VocabTable};
use vocabflow::sampler::{cfg_velocity, cosine_schedule, integrate_rf};
use vocabflow::{Image, Tensor};

fn tensor(dims: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims, v).unwrap()
}

fn image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-1e3f64..1e3, 12)) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[3, 4], &v));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_is_associative(v in prop::collection::vec(-1.0f64..1.0, 192)) {
        let a = tensor(&[8, 8], &v[..64]);
        let b = tensor(&[8, 8], &v[64..128]);
        let c = tensor(&[8, 8], &v[128..]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-4);
    }

    #[test]
    fn gumbel_rows_sum_to_one(
        logits in prop::collection::vec(-50.0f64..50.0, 8),
        noise in prop::collection::vec(-3.0f64..8.0, 8),
        tau in 1e-2f64..10.0,
    ) {
        let mut g = Graph::new();
        let l = g.constant(tensor(&[1, 8], &logits));
        let a = gumbel_alpha(&mut g, l, Some(tensor(&[1, 8], &noise)), tau).unwrap();
        let row = g.value(a).data();
        prop_assert!(row.iter().all(|&p| p >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_noise_argmax_ignores_tau(logits in prop::collection::vec(-5.0f64..5.0, 10), tau in 1e-2f64..10.0) {
        let mut g = Graph::new();
        let l = g.constant(tensor(&[1, 10], &logits));
        let a = gumbel_alpha(&mut g, l, None, tau).unwrap();
        prop_assert_eq!(argmax(g.value(a).data()), argmax(&logits));
    }

    #[test]
    fn embeddings_stay_in_vocab_hull(seed in any::<u64>(), logits in prop::collection::vec(-4.0f64..4.0, 24)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = VocabTable::<f64>::random(8, 5, &mut rng).unwrap();
        let mut g = Graph::new();
        let l = g.constant(tensor(&[3, 8], &logits));
        let a = gumbel_alpha(&mut g, l, None, 1.0).unwrap();
        let table = g.constant(vocab.table().clone());
        let v = embed_vocab(&mut g, a, table).unwrap();
        let t = vocab.table();
        for row in g.value(v).data().chunks(5) {
            for (j, &x) in row.iter().enumerate() {
                let col: Vec<f64> = (0..8).map(|i| t.row(i)[j]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-12 <= x && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn quantize_is_idempotent(seed in any::<u64>(), v in prop::collection::vec(-2.0f64..2.0, 40)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = VocabTable::<f64>::random(32, 4, &mut rng).unwrap();
        let cb = Codebook::from_vocab(&vocab, 12, 0.99, 1e-5, &mut rng).unwrap();
        let first = cb.quantize(&tensor(&[10, 4], &v)).unwrap();
        let second = cb.quantize(&first.codes).unwrap();
        prop_assert_eq!(first.indices, second.indices);
    }

    #[test]
    fn patchify_round_trips(side in 1usize..5, patch in 1usize..5, channels in 1usize..4, seed in any::<u64>()) {
        let img = image(side * patch, side * patch, channels, seed);
        let set = patchify(&img, patch).unwrap();
        prop_assert_eq!(set.len(), side * side);
        prop_assert_eq!(unpatchify(&set).unwrap(), img);
    }

    #[test]
    fn path_difference_is_velocity(
        z in prop::collection::vec(-1.0f64..1.0, 6),
        eps in prop::collection::vec(-3.0f64..3.0, 6),
        t in 0.01f64..0.99,
        h in 1e-4f64..1e-2,
    ) {
        prop_assume!(t - h >= 0.0 && t + h <= 1.0);
        let hi = make_path(&z, &eps, t + h).unwrap();
        let lo = make_path(&z, &eps, t - h).unwrap();
        for i in 0..6 {
            let d = (hi[i] - lo[i]) / (2.0 * h);
            prop_assert!((d - (eps[i] - z[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn cfg_is_linear(
        v in prop::collection::vec(-2.0f64..2.0, 5),
        u in prop::collection::vec(-2.0f64..2.0, 5),
        omega in -1.0f64..4.0,
    ) {
        let out = cfg_velocity(&v, &u, omega).unwrap();
        for i in 0..5 {
            prop_assert!((out[i] - (omega * v[i] + (1.0 - omega) * u[i])).abs() < 1e-12);
        }
        prop_assert_eq!(cfg_velocity(&v, &u, 1.0).unwrap(), v);
    }

    #[test]
    fn constant_field_is_integrated_exactly(
        z in prop::collection::vec(-1.0f64..1.0, 4),
        eps in prop::collection::vec(-2.0f64..2.0, 4),
        steps in 1usize..40,
    ) {
        let start = tensor(&[1, 4], &eps);
        let vel = tensor(&[1, 4], &eps.iter().zip(&z).map(|(e, z)| e - z).collect::<Vec<_>>());
        let out = integrate_rf(&start, steps, |_, _| Ok(vel.clone())).unwrap();
        for (a, b) in out.data().iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = image(12, 12, 3, s1);
        let b = image(12, 12, 3, s2);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b, 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn schedule_partitions_every_grid_point() {
    for n in 1..=4096usize {
        let ks: Vec<usize> = if n <= 64 {
            (1..=n).collect()
        } else {
            [1, 2, 3, 7, 16, 63, 64, n / 2, n]
                .into_iter()
                .filter(|&k| k <= n)
                .collect()
        };
        for k in ks {
            let s = cosine_schedule(n, k).unwrap();
            assert!(s.reveal_counts.iter().all(|&c| c > 0), "n={n} k={k}");
            assert_eq!(s.total(), n, "n={n} k={k}");
        }
    }
}

#[test]
fn noise_lowers_psnr_and_ssim_monotonically() {
    use rand_distr::{Distribution, Normal};
    let base = image(16, 16, 3, 9);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for sigma in [0.01, 0.03, 0.1, 0.3] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, sigma).unwrap();
        let data = base.data.iter().map(|&v| v + n.sample(&mut rng) as f32).collect();
        let noisy = Image::new(16, 16, 3, data).unwrap();
        let p = psnr(&base, &noisy, 1.0).unwrap();
        let s = ssim(&base, &noisy, 1.0).unwrap();
        assert!(p < last.0 && s < last.1, "sigma {sigma}: {p} {s} after {last:?}");
        last = (p, s);
    }
}
