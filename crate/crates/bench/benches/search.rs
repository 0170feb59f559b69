use std::f64::consts::PI;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qem_bench::rng;
use qem_core::algorithms::{default_pixel_iterations, grover_pixel_search, grover_structure_search};
use qem_core::diffraction::{amplitude_error, scatter_profile, PHI_STEPS};
use qem_core::{
    BeamProfile, BijectionStrategy, CandidateSet, Composition, CrossSectionTable, NoiseConfig, OracleMode, PhaseMap,
};

fn pixel_search(c: &mut Criterion) {
    let mode = OracleMode::Physical(NoiseConfig::noise_free());
    let mut group = c.benchmark_group("grover_pixel");
    for d in [4, 8, 16] {
        let map = PhaseMap::single_pixel(d, (d / 2, d / 3), PI).unwrap();
        let mut r = rng(5);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, &d| {
            b.iter(|| grover_pixel_search(&map, 1, default_pixel_iterations(d), &mode, &mut r).unwrap())
        });
    }
    group.finish();
}

fn structure_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("structure_search");
    group.sample_size(10);
    for (label, mode) in [
        ("ideal", OracleMode::Ideal),
        ("physical", OracleMode::Physical(NoiseConfig::noise_free())),
    ] {
        for n in [4, 16] {
            let (set, truth, _) =
                CandidateSet::synthetic(4, n, 50, BijectionStrategy::LocalityBalanced, &mut rng(6)).unwrap();
            let mut r = rng(7);
            group.bench_with_input(BenchmarkId::new(label, n), &n, |b, _| {
                b.iter(|| grover_structure_search(&set, &truth, None, &mode, &mut r).unwrap())
            });
        }
    }
    group.finish();
}

fn amplitude(c: &mut Criterion) {
    let table = CrossSectionTable::screened_rutherford();
    let s = scatter_profile(&table, &Composition::default(), 0.05).unwrap();
    let beam = BeamProfile::new(0.05).unwrap();
    let mut group = c.benchmark_group("amplitude_error");
    group.sample_size(10);
    group.bench_function("default_grid", |b| {
        b.iter(|| amplitude_error(table.theta(), &s, &beam, 0.05, PHI_STEPS).unwrap())
    });
    group.finish();
}

criterion_group!(benches, pixel_search, structure_search, amplitude);
criterion_main!(benches);
