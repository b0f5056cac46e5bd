use dynphase::dynamics::{measure, measure_from_coefficients, random_instance, GeneratorOptions, InstanceKind};
use dynphase::experiments::{multivector_demo, Command, ExperimentConfig};
use dynphase::recovery::{align_global_phase, recover_signal_known_system, recover_unordered_spectrum, RecoveryOptions};
use dynphase::Complex64;
use proptest::prelude::*;

fn complex_vec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| Complex64::new(a, b)), n)
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // a global phase on the coefficients and a common rotation of the
    // spectrum leave every sample unchanged
    #[test]
    fn samples_invariant_under_gauge(c in complex_vec(5), lam in complex_vec(5), theta in -3.2f64..3.2, omega in -3.2f64..3.2) {
        let base = measure_from_coefficients(&c, &lam, 12);
        let cg: Vec<Complex64> = c.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect();
        let lg: Vec<Complex64> = lam.iter().map(|z| z * Complex64::from_polar(1.0, omega)).collect();
        prop_assert!(rel_diff(&base, &measure_from_coefficients(&cg, &lg, 12)) < 1e-12);
    }

    // conjugating coefficients and spectrum together is undetectable
    #[test]
    fn samples_invariant_under_conjugation(c in complex_vec(4), lam in complex_vec(4)) {
        let base = measure_from_coefficients(&c, &lam, 10);
        let cc: Vec<Complex64> = c.iter().map(|z| z.conj()).collect();
        let lc: Vec<Complex64> = lam.iter().map(|z| z.conj()).collect();
        prop_assert!(rel_diff(&base, &measure_from_coefficients(&cc, &lc, 10)) < 1e-12);
    }

    #[test]
    fn recovered_signal_is_gauge_covariant(seed in 0u64..10_000, d in 1usize..5, theta in -3.2f64..3.2) {
        let inst = random_instance(InstanceKind::GenericCollisionFree, d, seed, &GeneratorOptions::default()).unwrap();
        let sys = inst.system.diagonalizable();
        let phi = &inst.sampling[0];
        let xr: Vec<Complex64> = inst.x.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect();
        let l = 4 * d * d + 1;
        let a = recover_signal_known_system(&sys, phi, &measure(&sys, &inst.x, phi, l).unwrap()).unwrap();
        let b = recover_signal_known_system(&sys, phi, &measure(&sys, &xr, phi, l).unwrap()).unwrap();
        let (sa, sb) = (a.signal.unwrap(), b.signal.unwrap());
        let al = align_global_phase(&sa, &xr, false).unwrap();
        prop_assert!(al.err_inf < 1e-6, "seed {seed}: {}", al.err_inf);
        // same samples, same gauge-fixed answer
        let same = sa.iter().zip(sb.iter()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        prop_assert!(same < 1e-6, "seed {seed}: {same}");
    }
}

#[test]
fn unordered_spectrum_recovered_up_to_rotation_and_conjugation() {
    let opts = RecoveryOptions::default();
    for d in 1..=4 {
        for seed in 0..20 {
            let inst = random_instance(InstanceKind::GenericCollisionFree, d, seed, &GeneratorOptions::default()).unwrap();
            let sys = inst.system.diagonalizable();
            let h = measure(&sys, &inst.x, &inst.sampling[0], 4 * d * d + 1).unwrap();
            let rec = recover_unordered_spectrum(&h, d, &opts).unwrap_or_else(|e| panic!("d {d} seed {seed}: {e}"));
            // compare multisets of pairwise products, which are gauge invariant
            let products = |v: &[Complex64]| -> Vec<Complex64> { v.iter().flat_map(|a| v.iter().map(move |b| a * b.conj())).collect() };
            let got = products(&rec.mu);
            let dist = |want: &[Complex64]| {
                let mut used = vec![false; got.len()];
                let mut worst = 0.0f64;
                for w in want {
                    let (i, e) = got
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !used[*i])
                        .map(|(i, g)| (i, (g - w).norm()))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .unwrap();
                    used[i] = true;
                    worst = worst.max(e);
                }
                worst
            };
            let lam = sys.lambda();
            let conj: Vec<Complex64> = lam.iter().map(|z| z.conj()).collect();
            let err = dist(&products(lam)).min(dist(&products(&conj)));
            assert!(err < 1e-6, "d {d} seed {seed}: {err}");
        }
    }
}

// Narrow sampling vectors of width w need 2 w^2 samples each for their
// exponential sums; one more makes the Hankel matrix square-complete.
#[test]
fn multi_vector_succeeds_at_minimal_sample_count_width_three() {
    for d in [5, 8, 12] {
        let cfg = ExperimentConfig {
            d: Some(d),
            window: Some(3),
            l: Some(2 * 9 + 1),
            trials: Some(40),
            seed: Some(100),
            ..Default::default()
        }
        .resolve(Command::MultivectorDemo)
        .unwrap();
        let out = multivector_demo(&cfg).unwrap();
        assert!(out.failures.is_empty(), "d {d}: {:?}", out.failures);
        for r in &out.rows {
            assert!(r.values[2] < 1e-6, "d {d} seed {}: spectrum error {}", r.seed, r.values[2]);
        }
    }
}

#[test]
fn total_samples_grow_linearly_in_dimension() {
    for d in [10, 20, 40] {
        let cfg = ExperimentConfig {
            d: Some(d),
            ..Default::default()
        }
        .resolve(Command::MultivectorDemo)
        .unwrap();
        let total = (cfg.d - cfg.window + 1) * cfg.samples;
        assert!(total <= d * (4 * cfg.window * cfg.window + 1));
    }
}
