//! Property tests for the spec-level invariants of the numeric kernel and
//! the rank statistics.

use proptest::prelude::*;

use genmeter_core::correlation::kendall_tau;
use genmeter_core::linalg::spectral_norm;
use genmeter_core::rng::SeededRng;
use genmeter_core::tensor::{conv2d, frobenius_norm_sq, Tensor};
use genmeter_core::trainer::dice_loss;

fn small_f32() -> impl Strategy<Value = f32> {
    (-2.0f32..2.0).prop_map(|v| (v * 64.0).round() / 64.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_the_kernel(
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut rng = SeededRng::new(seed, 1);
        let img = rng.sample_normal(0.0, 1.0, &[5, 6, 2]);
        let k1 = rng.sample_normal(0.0, 1.0, &[3, 3, 2, 3]);
        let k2 = rng.sample_normal(0.0, 1.0, &[3, 3, 2, 3]);
        let bias = Tensor::zeros(&[3]);

        let mut k_mix = k1.clone();
        for (m, (&x, &y)) in k_mix.data_mut().iter_mut().zip(k1.data().iter().zip(k2.data())) {
            *m = (a * x as f64 + b * y as f64) as f32;
        }
        let lhs = conv2d(&img, &k_mix, &bias).unwrap();
        let c1 = conv2d(&img, &k1, &bias).unwrap();
        let c2 = conv2d(&img, &k2, &bias).unwrap();
        for ((&l, &x), &y) in lhs.data().iter().zip(c1.data()).zip(c2.data()) {
            let want = a * x as f64 + b * y as f64;
            let tol = 1e-5 * want.abs().max(1.0);
            prop_assert!((l as f64 - want).abs() <= tol, "{l} vs {want}");
        }
    }

    #[test]
    fn spectral_norm_bounded_by_frobenius(seed in 0u64..1000, r in 1usize..10, c in 1usize..10) {
        let mut rng = SeededRng::new(seed, 2);
        let m = rng.sample_normal(0.0, 1.0, &[r, c]);
        let s = spectral_norm(&m, 1e-9, 400, &mut SeededRng::new(seed, 3)).unwrap();
        let f = frobenius_norm_sq(&m).sqrt();
        prop_assert!(s.value <= f + 1e-6, "spectral {} > frobenius {}", s.value, f);
    }

    #[test]
    fn spectral_norm_scales_homogeneously(seed in 0u64..1000, c in -4.0f64..4.0) {
        let mut rng = SeededRng::new(seed, 4);
        let m = rng.sample_normal(0.0, 1.0, &[6, 4]);
        let mut cm = m.clone();
        for v in cm.data_mut() {
            *v = (*v as f64 * c) as f32;
        }
        let sm = spectral_norm(&m, 1e-10, 500, &mut SeededRng::new(seed, 5)).unwrap().value;
        let scm = spectral_norm(&cm, 1e-10, 500, &mut SeededRng::new(seed, 5)).unwrap().value;
        let want = c.abs() * sm;
        prop_assert!((scm - want).abs() <= 1e-4 * want.max(1e-9) + 1e-9, "{scm} vs {want}");
    }

    #[test]
    fn tau_invariant_under_increasing_transforms(values in prop::collection::vec((small_f32(), small_f32()), 2..40)) {
        let mu: Vec<f64> = values.iter().map(|&(a, _)| a as f64).collect();
        let g: Vec<f64> = values.iter().map(|&(_, b)| b as f64).collect();
        let base = kendall_tau(&mu, &g).unwrap();
        // exp is strictly increasing.
        let mu_exp: Vec<f64> = mu.iter().map(|&v| v.exp()).collect();
        prop_assert_eq!(kendall_tau(&mu_exp, &g).unwrap(), base);
        // So is any positive affine map, on either argument.
        let g_aff: Vec<f64> = g.iter().map(|&v| 2.5 * v + 7.0).collect();
        prop_assert_eq!(kendall_tau(&mu, &g_aff).unwrap(), base);
    }

    #[test]
    fn tau_symmetry_and_negation(values in prop::collection::vec((0u32..10_000, 0u32..10_000), 2..30)) {
        // Deduplicate to dodge ties; the antisymmetry law needs tie-free data.
        let mut seen_mu = std::collections::HashSet::new();
        let mut seen_g = std::collections::HashSet::new();
        let mut mu = Vec::new();
        let mut g = Vec::new();
        for &(a, b) in &values {
            if seen_mu.insert(a) && seen_g.insert(b) {
                mu.push(a as f64);
                g.push(b as f64);
            }
        }
        prop_assume!(mu.len() >= 2);
        let t = kendall_tau(&mu, &g).unwrap();
        prop_assert_eq!(kendall_tau(&g, &mu).unwrap(), t);
        let neg: Vec<f64> = mu.iter().map(|&v| -v).collect();
        prop_assert_eq!(kendall_tau(&neg, &g).unwrap(), -t);
    }

    #[test]
    fn dice_is_symmetric_on_binary_masks(bits in prop::collection::vec((0u8..2, 0u8..2), 12)) {
        let p: Vec<f32> = bits.iter().map(|&(a, _)| a as f32).collect();
        let g: Vec<f32> = bits.iter().map(|&(_, b)| b as f32).collect();
        let pt = Tensor::new(&[1, 3, 4], p).unwrap();
        let gt = Tensor::new(&[1, 3, 4], g).unwrap();
        prop_assert_eq!(
            dice_loss(&pt, &gt).unwrap().to_bits(),
            dice_loss(&gt, &pt).unwrap().to_bits()
        );
    }

    #[test]
    fn referential_transparency_of_kernel_ops(seed in 0u64..500) {
        let mut r1 = SeededRng::new(seed, 9);
        let mut r2 = SeededRng::new(seed, 9);
        let img1 = r1.sample_normal(0.0, 1.0, &[4, 4, 2]);
        let img2 = r2.sample_normal(0.0, 1.0, &[4, 4, 2]);
        let k1 = r1.sample_normal(0.0, 1.0, &[3, 3, 2, 2]);
        let k2 = r2.sample_normal(0.0, 1.0, &[3, 3, 2, 2]);
        let b = Tensor::zeros(&[2]);
        let o1 = conv2d(&img1, &k1, &b).unwrap();
        let o2 = conv2d(&img2, &k2, &b).unwrap();
        prop_assert_eq!(o1.data(), o2.data());
    }
}
