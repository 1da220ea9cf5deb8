use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sincadapt::analysis::{avg_log_mel, export_filters, fit_alpha, import_filters, scaling_pairs};
use sincadapt::filterbank::{init_filterbank, InitScheme, SincFilter, SincFilterbank};

const SR: f64 = 16000.0;

fn scaled(fb: &SincFilterbank, alpha: f64) -> SincFilterbank {
    let mut out = fb.clone();
    for f in &mut out.filters {
        *f = SincFilter::new(f.f_low * alpha, f.f_high * alpha);
    }
    out
}

proptest! {
    #[test]
    fn identity_scaling_is_exact(seed in any::<u64>(), n in 2usize..60) {
        let fb = init_filterbank(InitScheme::Uniform { seed }, n, 129, SR).unwrap();
        let s = scaling_pairs(&fb, &fb).unwrap();
        prop_assert!(s.pairs.iter().all(|(r, a)| r == a));
        prop_assert!(s.pairs.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert_eq!(fit_alpha(&s, 0.0, SR / 2.0).unwrap(), 1.0);
    }

    #[test]
    fn fitted_slope_recovers_uniform_scaling(alpha in 0.8..1.25f64, n in 4usize..40) {
        let fb = init_filterbank(InitScheme::Mel, n, 129, SR).unwrap();
        let s = scaling_pairs(&scaled(&fb, alpha), &fb).unwrap();
        let est = fit_alpha(&s, 0.0, SR / 2.0).unwrap();
        prop_assert!((est - alpha).abs() <= 1e-12 * alpha);
    }

    #[test]
    fn slope_is_invariant_to_rescaling_both_axes(alpha in 0.8..1.25f64, c in 0.1..10.0f64, seed in any::<u64>()) {
        let fb = init_filterbank(InitScheme::Uniform { seed }, 20, 129, SR).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = scaling_pairs(&scaled(&fb, alpha), &fb).unwrap();
        s.pairs.iter_mut().for_each(|p| p.1 += rng.gen_range(-50.0..50.0));
        let a = fit_alpha(&s, 0.0, SR).unwrap();
        let mut t = s.clone();
        t.pairs.iter_mut().for_each(|p| *p = (p.0 * c, p.1 * c));
        let b = fit_alpha(&t, 0.0, SR * c).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mean_log_mel_ignores_frame_order(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f64>> = (0..n).map(|_| (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
        let mut rev = refs.clone();
        rev.reverse();
        rev.rotate_left(seed as usize % n);
        let a = avg_log_mel(&refs, 40, SR).unwrap();
        let b = avg_log_mel(&rev, 40, SR).unwrap();
        prop_assert_eq!(&a.centres_hz, &b.centres_hz);
        for (x, y) in a.mean.iter().zip(&b.mean) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn filters_csv_round_trips(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fb = init_filterbank(InitScheme::Uniform { seed }, n, 129, SR).unwrap();
        fb.gains = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        export_filters(&fb, &p).unwrap();
        let back = import_filters(&p, 129, SR).unwrap();
        prop_assert_eq!(back.len(), n);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * a.abs().max(1e-3);
        for ((f, g), (bf, bg)) in fb.filters.iter().zip(&fb.gains).zip(back.filters.iter().zip(&back.gains)) {
            prop_assert!(close(f.f_low, bf.f_low) && close(f.f_high, bf.f_high) && close(*g, *bg));
        }
        // A second trip through the file is exact.
        export_filters(&back, &p).unwrap();
        prop_assert_eq!(import_filters(&p, 129, SR).unwrap(), back);
    }
}
