use proptest::prelude::*;

use crate::augment::reflect;
use crate::bradley_terry::{bt_fit, simulate_tournament, BtOptions, Comparison};
use crate::color::rgb_to_hsv;
use crate::layers::gap_forward;
use crate::rating::{fit_gaussian, kl_gaussian, mean_rating, quantize_binary, BinaryLabel, KlForm, RatingGaussian, RatingHistogram};
use crate::rgb::RgbImage;
use crate::{Shape, Tensor};

fn image(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut s = seed | 1;
    RgbImage::from_fn(h, w, |_, _| {
        let mut px = [0u8; 3];
        for p in &mut px {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *p = (s >> 24) as u8;
        }
        px
    })
    .unwrap()
}

fn rank(l: BinaryLabel) -> u8 {
    match l {
        BinaryLabel::Low => 0,
        BinaryLabel::Excluded => 1,
        BinaryLabel::High => 2,
    }
}

fn strengths() -> Vec<(String, f64)> {
    [("groundtruth", 1.0), ("a", 0.8), ("b", 0.5), ("c", 0.2)]
        .iter()
        .map(|&(k, v)| (k.to_string(), v))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gap_ignores_spatial_permutation(h in 1usize..6, w in 1usize..6, seed in any::<u64>(), shift in 0usize..36) {
        let x = Tensor::from_fn(Shape::new(2, 3, h, w), |n, c, y, xx| {
            ((seed.wrapping_add((n * 131 + c * 17 + y * 7 + xx) as u64)) % 1000) as f64 / 37.0 - 13.0
        });
        let hw = h * w;
        let perm: Vec<usize> = (0..hw).map(|i| (i * 5 + shift) % hw).collect();
        let mut unique = perm.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assume!(unique.len() == hw);
        let y = Tensor::from_fn(x.shape(), |n, c, yy, xx| {
            let p = perm[yy * w + xx];
            x.at(n, c, p / w, p % w)
        });
        let a = gap_forward(&x);
        let b = gap_forward(&y);
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn reflection_is_an_involution(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let img = image(h, w, seed);
        prop_assert_eq!(reflect(&reflect(&img)), img);
    }

    #[test]
    fn quantize_is_monotone_in_the_mean(a in 1.0f64..10.0, b in 1.0f64..10.0, delta in 0.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rank(quantize_binary(lo, delta)) <= rank(quantize_binary(hi, delta)));
    }

    #[test]
    fn gaussian_fit_mean_is_the_rating_mean(counts in proptest::array::uniform10(0u32..50)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let h = RatingHistogram(counts);
        prop_assert_eq!(fit_gaussian(&h).unwrap().mu, mean_rating(&h).unwrap());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(m1 in 1.0f64..10.0, s1 in 0.2f64..3.0, m2 in 1.0f64..10.0, s2 in 0.2f64..3.0) {
        let p = RatingGaussian::new(m1, s1).unwrap();
        let q = RatingGaussian::new(m2, s2).unwrap();
        prop_assert!(kl_gaussian(&p, &q, KlForm::Corrected).unwrap() >= -1e-15);
        prop_assert!(kl_gaussian(&p, &p, KlForm::Corrected).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hsv_planes_are_quarter_size_and_in_range(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
        let t = rgb_to_hsv(&image(h, w, seed)).unwrap().to_tensor();
        prop_assert_eq!(t.shape(), Shape::new(1, 3, h.div_ceil(4), w.div_ceil(4)));
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn raw_bytes_round_trip(h in 1usize..16, w in 1usize..16, seed in any::<u64>()) {
        let img = image(h, w, seed);
        prop_assert_eq!(RgbImage::from_raw_bytes(&img.to_raw_bytes()).unwrap(), img);
    }

    #[test]
    fn concat_then_split_is_identity(a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let x = Tensor::from_fn(Shape::new(2, a, 3, 2), |n, c, y, xx| (seed % 97) as f64 + (n * 1000 + c * 100 + y * 10 + xx) as f64);
        let y = Tensor::from_fn(Shape::new(2, b, 3, 2), |n, c, yy, xx| -((n * 1000 + c * 100 + yy * 10 + xx) as f64));
        let joined = Tensor::concat_channels(&[&x, &y]).unwrap();
        let parts = joined.split_channels(&[a, b]).unwrap();
        prop_assert_eq!(&parts[0], &x);
        prop_assert_eq!(&parts[1], &y);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mm_log_likelihood_never_decreases(seed in any::<u64>(), n in 20usize..400) {
        let comps = simulate_tournament(&strengths(), n, seed).unwrap();
        let fit = bt_fit(&comps, &BtOptions { virtual_ties: true, ..BtOptions::default() }).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn lp_factors_ignore_duplicating_the_data(seed in any::<u64>(), copies in 2usize..5) {
        let comps = simulate_tournament(&strengths(), 300, seed).unwrap();
        let many: Vec<Comparison> = (0..copies).flat_map(|_| comps.iter().cloned()).collect();
        let opts = BtOptions { virtual_ties: false, tol: 1e-12, ..BtOptions::default() };
        prop_assume!(bt_fit(&comps, &opts).is_ok());
        let one = bt_fit(&comps, &opts).unwrap();
        let rep = bt_fit(&many, &opts).unwrap();
        for (k, v) in &one.lp_factors {
            prop_assert!((v - rep.lp_factors[k]).abs() < 1e-6, "{}: {} vs {}", k, v, rep.lp_factors[k]);
        }
    }

    #[test]
    fn lp_factors_ignore_the_strength_scale(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let base = strengths();
        let scaled: Vec<(String, f64)> = base.iter().map(|(k, v)| (k.clone(), v * scale)).collect();
        let opts = BtOptions { virtual_ties: true, ..BtOptions::default() };
        let a = bt_fit(&simulate_tournament(&base, 500, seed).unwrap(), &opts).unwrap();
        let b = bt_fit(&simulate_tournament(&scaled, 500, seed).unwrap(), &opts).unwrap();
        for (k, v) in &a.lp_factors {
            prop_assert!((v - b.lp_factors[k]).abs() < 1e-6, "{}: {} vs {}", k, v, b.lp_factors[k]);
        }
    }
}
