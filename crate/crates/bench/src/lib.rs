//! Seeded fixtures shared by the benchmarks.

use std::f64::consts::PI;

use qem_core::{PhaseMap, RegisterLayout, StateVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// A random `d×d` phase map in `[-π, π)`.
pub fn random_map(d: usize, seed: u64) -> PhaseMap {
    let mut r = rng(seed);
    PhaseMap::new(d, (0..d * d).map(|_| r.random_range(-PI..PI)).collect()).expect("finite phases")
}

/// A random normalized state on the `[x, y]` pixel register.
pub fn pixel_state(d: usize, seed: u64) -> StateVector {
    let layout = RegisterLayout::new([("x", d), ("y", d)]).expect("valid layout");
    StateVector::random(layout, &mut rng(seed))
}
