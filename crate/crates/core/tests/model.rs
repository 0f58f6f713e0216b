use mpamp_core::model::*;
use mpamp_core::Error;
use proptest::prelude::*;

fn prior(eps: f64) -> SignalPrior {
    SignalPrior::new(eps, 0.0, 1.0).unwrap()
}

fn config(seed: u64) -> ProblemConfig {
    ProblemConfig {
        n: 4000,
        m: 1200,
        p: 30,
        snr_db: 20.0,
        seed,
    }
}

#[test]
fn signal_statistics_follow_the_prior() {
    let p = SignalPrior::new(0.1, 0.5, 2.0).unwrap();
    let n = 400_000;
    let s = sample_signal(&p, n, 4).unwrap();
    let nz: Vec<f64> = s.iter().copied().filter(|&x| x != 0.0).collect();
    let frac = nz.len() as f64 / n as f64;
    assert!((frac - 0.1).abs() < 4.0 * (0.1f64 * 0.9 / n as f64).sqrt());
    let m = nz.iter().sum::<f64>() / nz.len() as f64;
    let v = nz.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / nz.len() as f64;
    assert!((m - 0.5).abs() < 0.03);
    assert!((v / 4.0 - 1.0).abs() < 0.03);
    assert_eq!(p.mean(), 0.05);
    assert!((p.second_moment() - 0.1 * (4.0 + 0.25)).abs() < 1e-15);
}

#[test]
fn instances_are_reproducible_and_independent_per_stream() {
    let a = build_instance(config(1), prior(0.05)).unwrap();
    let b = build_instance(config(1), prior(0.05)).unwrap();
    assert_eq!(a.s0, b.s0);
    assert_eq!(a.a, b.a);
    assert_eq!(a.y, b.y);
    let c = build_instance(config(2), prior(0.05)).unwrap();
    assert_ne!(a.a, c.a);
    // The signal stream does not depend on the matrix shape.
    let mut wide = config(1);
    wide.m = 1500;
    let d = build_instance(wide, prior(0.05)).unwrap();
    assert_eq!(a.s0, d.s0);
    assert_eq!(a.s0.to_vec(), sample_signal(&prior(0.05), 4000, 1).unwrap());
}

#[test]
fn measurement_model_and_scaling() {
    let inst = build_instance(config(3), prior(0.05)).unwrap();
    let (m, n) = (inst.m(), inst.n());
    assert_eq!(inst.a.dim(), (m, n));
    // Entries N(0, 1/M): columns have unit norm on average.
    let col2: f64 = inst.a.iter().map(|x| x * x).sum::<f64>() / n as f64;
    assert!((col2 - 1.0).abs() < 0.01);
    let resid = &inst.y - &inst.a.dot(&inst.s0);
    for (r, e) in resid.iter().zip(&inst.e) {
        assert!((r - e).abs() < 1e-12);
    }
    assert_eq!(inst.kappa(), 0.3);
    // SNR 20 dB with rho = eps / kappa.
    assert!((inst.sigma2_e() - (0.05 / 0.3) * 0.01).abs() < 1e-15);
    assert_eq!(inst.row_ranges.len(), 30);
    assert!(inst.row_ranges.iter().all(|r| r.len() == 40));
}

#[test]
fn noise_variance_matches_snr() {
    // Pooled over seeds: 6000 draws put the chi-square spread near 1.8%.
    let mut acc = 0.0;
    for seed in 0..5 {
        let inst = build_instance(config(seed), prior(0.05)).unwrap();
        acc += inst.e.iter().map(|x| x * x).sum::<f64>();
    }
    let noise = acc / 6000.0;
    let want = sigma2_e_for(0.05, 0.3, 20.0);
    assert!((noise / want - 1.0).abs() < 0.06, "{noise} vs {want}");
}

#[test]
fn partitions_cover_rows_exactly_once() {
    let parts = partition_rows(3000, 30).unwrap();
    assert_eq!(parts.first().unwrap().start, 0);
    assert_eq!(parts.last().unwrap().end, 3000);
    assert!(parts.windows(2).all(|w| w[0].end == w[1].start));
    assert!(matches!(partition_rows(3000, 7), Err(Error::Partition(_))));
    assert!(partition_rows(3000, 0).is_err());
}

#[test]
fn invalid_configurations() {
    assert!(SignalPrior::new(0.0, 0.0, 1.0).is_err() || SignalPrior::new(-0.1, 0.0, 1.0).is_err());
    assert!(SignalPrior::new(1.5, 0.0, 1.0).is_err());
    assert!(SignalPrior::new(0.1, 0.0, -1.0).is_err());
    let mut c = config(1);
    c.m = 5000;
    assert!(c.validate().is_err());
    let mut c = config(1);
    c.m = 1201;
    assert!(matches!(c.validate(), Err(Error::Partition(_))));
    let mut c = config(1);
    c.snr_db = f64::NAN;
    assert!(c.validate().is_err());
    assert!(sample_signal(&prior(0.1), 0, 1).is_err());
    assert!(empirical_sdr(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn sdr_definition() {
    let s0 = [1.0, -2.0, 0.0, 0.5];
    assert_eq!(empirical_sdr(&s0, &s0).unwrap(), f64::INFINITY);
    let x = [1.1, -2.0, 0.0, 0.5];
    let want = 10.0 * (5.25f64 / 0.01).log10();
    assert!((empirical_sdr(&x, &s0).unwrap() - want).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn streams_are_deterministic(seed in any::<u64>(), stream in 0u64..8) {
        use rand::Rng;
        let a: Vec<u64> = (0..4).map({ let mut r = stream_rng(seed, stream); move |_| r.random() }).collect();
        let b: Vec<u64> = (0..4).map({ let mut r = stream_rng(seed, stream); move |_| r.random() }).collect();
        let c: Vec<u64> = (0..4).map({ let mut r = stream_rng(seed, stream + 1); move |_| r.random() }).collect();
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn noise_variance_scales_with_snr(eps in 0.01f64..0.5, kappa in 0.05f64..1.0, snr in -10.0f64..40.0) {
        let s = sigma2_e_for(eps, kappa, snr);
        let s10 = sigma2_e_for(eps, kappa, snr + 10.0);
        prop_assert!((s / s10 - 10.0).abs() < 1e-9);
        prop_assert!((10.0 * (eps / kappa / s).log10() - snr).abs() < 1e-9);
    }
}
