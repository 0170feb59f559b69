//! Cross-module invariants as property tests.

use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use qem_core::algorithms::{
    analytic_grover_success, build_bijection, build_pixel_set, grover_pixel_search, BijectionStrategy, PixelSet,
};
use qem_core::experiment::run_trials;
use qem_core::feasibility::{excitation_probability, ExcitationMode};
use qem_core::oracle::{oracle_call_ideal, oracle_call_physical, oracle_call_physical_forced};
use qem_core::*;

fn layout(d: usize) -> RegisterLayout {
    RegisterLayout::new([("x", d), ("y", d)]).unwrap()
}

fn phase_map(d: usize, rng: &mut ChaCha20Rng) -> PhaseMap {
    PhaseMap::new(d, (0..d * d).map(|_| rng.random_range(-PI..PI)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn physical_call_matches_ideal(d in 1usize..=5, seed in any::<u64>(), spectator in 1usize..=3) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let map = phase_map(d, &mut rng);
        let lay = RegisterLayout::new([("s", spectator), ("x", d), ("y", d)]).unwrap();
        let s0 = StateVector::random(lay, &mut rng);
        let mut ideal = s0.clone();
        oracle_call_ideal(&mut ideal, [1, 2], &map, &mut DoseLedger::new(d)).unwrap();
        let (k, l) = (rng.random_range(0..d), rng.random_range(0..d));
        let mut phys = s0;
        oracle_call_physical_forced(&mut phys, [1, 2], &map, &NoiseConfig::noise_free(), &mut rng, &mut DoseLedger::new(d), (k, l)).unwrap();
        prop_assert!(phys.phase_aligned_distance(&ideal) <= 1e-10);
    }

    #[test]
    fn dose_is_conserved_per_pass(d in 1usize..=6, calls in 1usize..=12, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let map = phase_map(d, &mut rng);
        let mut state = StateVector::random(layout(d), &mut rng);
        let mut ledger = DoseLedger::new(d);
        let mut before = 0.0;
        for _ in 0..calls {
            oracle_call_physical(&mut state, [0, 1], &map, &NoiseConfig::noise_free(), &mut rng, &mut ledger).unwrap();
            let total = ledger.total_dose();
            prop_assert!((total - before - 1.0).abs() <= 1e-9);
            before = total;
        }
        prop_assert_eq!(ledger.electrons(), calls as u64);
        prop_assert!((state.norm() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn phase_map_csv_round_trip(d in 1usize..=6, seed in any::<u64>(), alpha in proptest::option::of(0usize..100)) {
        let map = phase_map(d, &mut ChaCha20Rng::seed_from_u64(seed));
        let (a, back) = PhaseMap::parse_csv(&map.to_csv(alpha), std::path::Path::new("m.csv")).unwrap();
        prop_assert_eq!(a, alpha);
        prop_assert_eq!(back, map);
    }

    #[test]
    fn bijections_are_permutations_and_local(half_d in 1usize..=4, seed in any::<u64>()) {
        let d = 2 * half_d;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let set = build_pixel_set(&phase_map(d, &mut rng).zero_mean()).unwrap();
        prop_assert_eq!(set.members().len(), d * d / 2);
        let raster = build_bijection(&set, BijectionStrategy::Raster);
        let local = build_bijection(&set, BijectionStrategy::LocalityBalanced);
        for b in [&raster, &local] {
            let perm = b.to_permutation();
            let mut seen = vec![false; d * d];
            for &v in perm.as_slice() {
                prop_assert!(!seen[v]);
                seen[v] = true;
            }
            for (beta, &pixel) in b.order().iter().enumerate() {
                prop_assert_eq!(b.beta(pixel), Some(beta));
                prop_assert!(set.contains(pixel));
            }
        }
        prop_assert!(local.adjacency_spread() <= raster.adjacency_spread() + 1e-12);
        let rebuilt = PixelSet::new(d, set.members().to_vec()).unwrap();
        prop_assert_eq!(rebuilt, set);
    }

    #[test]
    fn magnetic_excitation_is_quadratic_in_flux(scale in 1e-3f64..1e3, lambda in 1e-2f64..1e2) {
        let k = CODATA_2018;
        let p = CircuitParams::free_space(1e-4, &k).unwrap();
        let phi = k.e * k.z0() * 1e-3;
        let (one, _) = excitation_probability(&p, ExcitationMode::Magnetic, phi, &k);
        let (many, _) = excitation_probability(&p, ExcitationMode::Magnetic, phi * scale.sqrt(), &k);
        prop_assert!((many.formal / one.formal / scale - 1.0).abs() <= 1e-9);
        prop_assert!((many.reduced / one.reduced / scale - 1.0).abs() <= 1e-9);

        // Rescaling every length by λ is a change of length unit: L, C and l
        // scale together, and no dimensionless output may move.
        let q = CircuitParams::new(p.inductance * lambda, p.capacitance * lambda, p.length * lambda).unwrap();
        let a = qem_core::feasibility::back_action(&p, &k).unwrap();
        let b = qem_core::feasibility::back_action(&q, &k).unwrap();
        for (x, y) in [
            (a.omega_tau, b.omega_tau),
            (a.delta_q.formal, b.delta_q.formal),
            (a.delta_phi.formal, b.delta_phi.formal),
            (a.p_ex_magnetic.formal, b.p_ex_magnetic.formal),
            (a.p_ex_electric.formal, b.p_ex_electric.formal),
        ] {
            prop_assert!((x / y - 1.0).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn grover_curve_for_any_marked_pixel(d in 2usize..=6, s in 0usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let marked = (rng.random_range(0..d), rng.random_range(0..d));
        let map = PhaseMap::single_pixel(d, marked, PI).unwrap();
        let r = grover_pixel_search(&map, 1, s, &OracleMode::Physical(NoiseConfig::noise_free()), &mut rng).unwrap();
        prop_assert!((r.success_probability - analytic_grover_success(d * d, s)).abs() <= 1e-9);
        prop_assert_eq!(r.electrons_used, s as u64);
    }

    #[test]
    fn trial_streams_ignore_scheduling(seed in any::<u64>(), threads in 1usize..=4) {
        let draw = |_: usize, rng: &mut ChaCha20Rng| Ok(rng.random::<u64>());
        let serial = run_trials(seed, 32, draw).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let parallel = pool.install(|| run_trials(seed, 32, draw)).unwrap();
        prop_assert_eq!(serial, parallel);
    }
}
