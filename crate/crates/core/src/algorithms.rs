//! Measurement protocols driven by the specimen oracle: multipass phase
//! contrast, Grover single-pixel search with its classical scan baseline,
//! and the Grover search over structure hypotheses.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QemError, Result};
use crate::oracle::{CollapseShape, DoseLedger, OracleMode, PhaseMap};
use crate::statevec::{sample_index, FourierDirection, Permutation, RegisterLayout, StateVector};

/// Largest |θ| for which the weak-phase expansion `e^{iθ} ≈ 1 + iθ` is trusted.
pub const WEAK_PHASE_LIMIT: f64 = 0.3;

const PHASE_TOL: f64 = 1e-12;

/// Outcome of one search trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Reported pixel (flat `p·d + q`) or hypothesis index; `None` if nothing was found.
    pub reported: Option<usize>,
    pub success: bool,
    /// Probability that the final measurement returns a correct answer.
    pub success_probability: f64,
    pub electrons_used: u64,
    pub ledger: DoseLedger,
    pub beta_outcomes: Vec<usize>,
    /// Candidates whose amplitude was removed by an inelastic collapse.
    pub lost_candidates: Vec<usize>,
}

/// `sin²((2s+1)·asin(1/√items))`, the textbook single-target Grover curve.
pub fn analytic_grover_success(items: usize, s: usize) -> f64 {
    let t = (1.0 / (items as f64).sqrt()).asin();
    ((2 * s + 1) as f64 * t).sin().powi(2)
}

/// `⌈(π/4)·d⌉`, the pixel-search default.
pub fn default_pixel_iterations(d: usize) -> usize {
    (PI / 4.0 * d as f64).ceil() as usize
}

/// Iteration count that maximizes single-target success among `n` items:
/// `⌊π / (4·asin(1/√n))⌋`, at least 1.
pub fn default_structure_iterations(n: usize) -> usize {
    let t = (1.0 / (n as f64).sqrt()).asin();
    ((PI / (4.0 * t)).floor() as usize).max(1)
}

fn pixel_layout(d: usize) -> Result<RegisterLayout> {
    RegisterLayout::new([("x", d), ("y", d)])
}

/// Phase plate: `i` on every nonzero frequency of the joint register.
fn phase_plate(len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|j| {
            if j == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 1.0)
            }
        })
        .collect()
}

/// Per-pixel phase-contrast signal after `m` oracle passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipassResult {
    pub d: usize,
    pub passes: usize,
    /// `(1 − d²·P(p,q)) / 2`, which is `m·(θ_pq − θ̄)` to first order.
    pub signal: Vec<f64>,
    /// Exact detection probabilities of the readout.
    pub probabilities: Vec<f64>,
    pub ledger: DoseLedger,
}

/// Uniform illumination, `m` oracle passes, then a Zernike-style readout:
/// inverse DFT, `i` on nonzero spatial frequencies, forward DFT.
pub fn multipass_imaging<R: Rng + ?Sized>(
    map: &PhaseMap,
    m: usize,
    mode: &OracleMode,
    rng: &mut R,
) -> Result<MultipassResult> {
    if m == 0 {
        return Err(QemError::InvalidArgument("multipass needs at least one pass".into()));
    }
    let d = map.d();
    let excursion = m as f64 * map.max_abs();
    if excursion > WEAK_PHASE_LIMIT {
        warn!("multipass: m·max|θ| = {excursion:.3} exceeds {WEAK_PHASE_LIMIT}; signal is no longer linear in θ");
    }
    let mut state = StateVector::uniform(pixel_layout(d)?);
    let mut ledger = DoseLedger::new(d);
    for _ in 0..m {
        mode.call(&mut state, [0, 1], map, rng, &mut ledger)?;
    }
    state.apply_fourier(0, FourierDirection::Inverse)?;
    state.apply_fourier(1, FourierDirection::Inverse)?;
    state.apply_diagonal(&[0, 1], &phase_plate(d * d))?;
    state.apply_fourier(0, FourierDirection::Forward)?;
    state.apply_fourier(1, FourierDirection::Forward)?;
    let probabilities = state.probabilities();
    let n = (d * d) as f64;
    let signal = probabilities.iter().map(|p| (1.0 - n * p) / 2.0).collect();
    Ok(MultipassResult {
        d,
        passes: m,
        signal,
        probabilities,
        ledger,
    })
}

/// The marked pixel of a map that is `π/k` at one pixel and zero elsewhere.
fn marked_pixel(map: &PhaseMap, k: usize) -> Result<usize> {
    let target = PI / k as f64;
    let mut marked = None;
    for (i, &t) in map.as_slice().iter().enumerate() {
        if (t - target).abs() <= PHASE_TOL {
            if marked.replace(i).is_some() {
                return Err(QemError::InvalidPhaseMap("more than one marked pixel".into()));
            }
        } else if t.abs() > PHASE_TOL {
            return Err(QemError::InvalidPhaseMap(format!(
                "pixel ({}, {}) has phase {t}, expected 0 or π/{k}",
                i / map.d(),
                i % map.d()
            )));
        }
    }
    marked.ok_or_else(|| QemError::InvalidPhaseMap(format!("no pixel with phase π/{k}")))
}

/// Grover search for the one pixel of phase `π/k`. Each iteration is `k`
/// oracle calls followed by diffusion over all `d²` pixels; the pixel
/// register is measured after `iterations` rounds.
pub fn grover_pixel_search<R: Rng + ?Sized>(
    map: &PhaseMap,
    k: usize,
    iterations: usize,
    mode: &OracleMode,
    rng: &mut R,
) -> Result<SearchResult> {
    if k == 0 {
        return Err(QemError::InvalidArgument("k must be at least 1".into()));
    }
    let marked = marked_pixel(map, k)?;
    let d = map.d();
    let mut state = StateVector::uniform(pixel_layout(d)?);
    let mut ledger = DoseLedger::new(d);
    for _ in 0..iterations {
        for _ in 0..k {
            mode.call(&mut state, [0, 1], map, rng, &mut ledger)?;
        }
        state.apply_grover_diffusion(&[0, 1])?;
    }
    let success_probability = state.marginal(&[0, 1])?[marked];
    let rec = state.measure(&[0, 1], rng)?;
    Ok(SearchResult {
        reported: Some(rec.outcome),
        success: rec.outcome == marked,
        success_probability,
        electrons_used: ledger.electrons(),
        ledger,
        beta_outcomes: Vec::new(),
        lost_candidates: Vec::new(),
    })
}

/// Electrons per pixel in [`classical_pixel_scan`]; each pass puts half
/// its probability on the pixel and half on the reference.
pub const CLASSICAL_BUDGET_PER_PIXEL: u64 = 2;

/// Pixel-by-pixel interferometric scan against an off-specimen reference.
/// Every pixel receives the same budget; a pass exits the dark port with
/// probability `sin²(θ/2)`. Reports the first pixel in raster order that
/// produced a dark count.
pub fn classical_pixel_scan<R: Rng + ?Sized>(map: &PhaseMap, rng: &mut R) -> Result<SearchResult> {
    let d = map.d();
    let n = d * d;
    let mut ledger = DoseLedger::new(d);
    let arm = RegisterLayout::new([("arm", 2)])?;
    let mut reported = None;
    let mut marginal = vec![0.0; n];
    for (pixel, &theta) in map.as_slice().iter().enumerate() {
        for _ in 0..CLASSICAL_BUDGET_PER_PIXEL {
            let mut s = StateVector::uniform(arm.clone());
            marginal[pixel] = 0.5;
            ledger.record_pass(&marginal)?;
            s.apply_diagonal_phase(&[0], &[theta, 0.0])?;
            s.apply_fourier(0, FourierDirection::Forward)?;
            if s.measure(&[0], rng)?.outcome == 1 && reported.is_none() {
                reported = Some(pixel);
            }
        }
        marginal[pixel] = 0.0;
    }
    let nonzero = map.nonzero_pixels();
    let success = match (reported, nonzero.as_slice()) {
        (None, []) => true,
        (Some(r), [(p, q)]) => r == p * d + q,
        _ => false,
    };
    Ok(SearchResult {
        reported,
        success,
        success_probability: if success { 1.0 } else { 0.0 },
        electrons_used: ledger.electrons(),
        ledger,
        beta_outcomes: Vec::new(),
        lost_candidates: Vec::new(),
    })
}

/// Half of the pixels of a `d × d` map, stored as flat indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelSet {
    d: usize,
    members: Vec<usize>,
}

impl PixelSet {
    pub fn new(d: usize, mut members: Vec<usize>) -> Result<Self> {
        if !d.is_multiple_of(2) || d == 0 {
            return Err(QemError::InvalidArgument(format!("pixel sets need even d, got {d}")));
        }
        members.sort_unstable();
        if members.len() != d * d / 2 {
            return Err(QemError::LengthMismatch {
                expected: d * d / 2,
                got: members.len(),
            });
        }
        if members.windows(2).any(|w| w[0] == w[1]) || members.last().is_some_and(|&m| m >= d * d) {
            return Err(QemError::InvalidArgument(
                "pixel set has duplicates or out-of-range pixels".into(),
            ));
        }
        Ok(Self { d, members })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.members.iter().map(|&i| (i / self.d, i % self.d))
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.members.binary_search(&pixel).is_ok()
    }

    /// Mean of `map` over the set.
    pub fn mean_phase(&self, map: &PhaseMap) -> f64 {
        self.members.iter().map(|&i| map.as_slice()[i]).sum::<f64>() / self.members.len() as f64
    }
}

/// The `d²/2` pixels with the largest phase; ties go to the earlier pixel in
/// raster order.
pub fn build_pixel_set(map: &PhaseMap) -> Result<PixelSet> {
    let d = map.d();
    if !d.is_multiple_of(2) {
        return Err(QemError::InvalidArgument(format!("pixel sets need even d, got {d}")));
    }
    let theta = map.as_slice();
    let mut order: Vec<usize> = (0..d * d).collect();
    order.sort_by(|&a, &b| {
        theta[b]
            .partial_cmp(&theta[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(d * d / 2);
    PixelSet::new(d, order)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BijectionStrategy {
    #[default]
    Raster,
    /// Start from the better of raster and Hilbert-curve order, then swap
    /// pairs while the mean `|Δβ|` over 4-adjacent member pairs decreases.
    LocalityBalanced,
}

/// `f_α`: members of a pixel set onto `β ∈ 0..d²/2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bijection {
    d: usize,
    /// `order[β]` is the flat pixel index sent to `β`.
    order: Vec<usize>,
}

impl Bijection {
    pub fn from_order(set: &PixelSet, order: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != set.members() {
            return Err(QemError::NotBijective(set.members().len()));
        }
        Ok(Self { d: set.d(), order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `β` of a pixel, if the pixel is in the set.
    pub fn beta(&self, pixel: usize) -> Option<usize> {
        self.order.iter().position(|&p| p == pixel)
    }

    /// Full permutation of the `d²` pixel indices: members go to `f_α`,
    /// the complement to `d²/2 + rank` in raster order.
    pub fn to_permutation(&self) -> Permutation {
        let n = self.d * self.d;
        let half = self.order.len();
        let mut table = vec![usize::MAX; n];
        for (beta, &pixel) in self.order.iter().enumerate() {
            table[pixel] = beta;
        }
        for (next, slot) in (half..).zip(table.iter_mut().filter(|t| **t == usize::MAX)) {
            *slot = next;
        }
        Permutation::new(table).expect("members and complement partition the pixels")
    }

    /// Mean `|Δβ|` over 4-adjacent pairs of members.
    pub fn adjacency_spread(&self) -> f64 {
        adjacency_spread(self.d, &self.order)
    }
}

fn adjacent_pairs(d: usize, order: &[usize]) -> Vec<(usize, usize)> {
    let mut pos = vec![usize::MAX; d * d];
    for (beta, &pixel) in order.iter().enumerate() {
        pos[pixel] = beta;
    }
    let mut pairs = Vec::new();
    for &pixel in order {
        let (p, q) = (pixel / d, pixel % d);
        if p + 1 < d && pos[pixel + d] != usize::MAX {
            pairs.push((pixel, pixel + d));
        }
        if q + 1 < d && pos[pixel + 1] != usize::MAX {
            pairs.push((pixel, pixel + 1));
        }
    }
    pairs
}

fn spread_of(pos: &[usize], pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: usize = pairs.iter().map(|&(a, b)| pos[a].abs_diff(pos[b])).sum();
    total as f64 / pairs.len() as f64
}

fn adjacency_spread(d: usize, order: &[usize]) -> f64 {
    let mut pos = vec![0; d * d];
    for (beta, &pixel) in order.iter().enumerate() {
        pos[pixel] = beta;
    }
    spread_of(&pos, &adjacent_pairs(d, order))
}

/// Position of `(x, y)` along the Hilbert curve filling an `n × n` grid,
/// `n` a power of two.
pub fn hilbert_index(n: usize, mut x: usize, mut y: usize) -> usize {
    let mut d = 0;
    let mut s = n / 2;
    while s > 0 {
        let rx = usize::from(x & s > 0);
        let ry = usize::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = n - 1 - x;
                y = n - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

pub fn build_bijection(set: &PixelSet, strategy: BijectionStrategy) -> Bijection {
    let d = set.d();
    let raster = set.members().to_vec();
    let order = match strategy {
        BijectionStrategy::Raster => raster,
        BijectionStrategy::LocalityBalanced => {
            let n = d.next_power_of_two();
            let mut hilbert = raster.clone();
            hilbert.sort_by_key(|&i| hilbert_index(n, i / d, i % d));
            let pairs = adjacent_pairs(d, &raster);
            let start = if adjacency_spread(d, &hilbert) < adjacency_spread(d, &raster) {
                hilbert
            } else {
                raster
            };
            descend_swaps(d, start, &pairs)
        }
    };
    Bijection { d, order }
}

/// Greedy pairwise-swap descent on the adjacency spread.
fn descend_swaps(d: usize, mut order: Vec<usize>, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut pos = vec![0; d * d];
    for (beta, &pixel) in order.iter().enumerate() {
        pos[pixel] = beta;
    }
    let mut best = spread_of(&pos, pairs);
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                let (a, b) = (order[i], order[j]);
                pos.swap(a, b);
                let s = spread_of(&pos, pairs);
                if s < best - 1e-12 {
                    best = s;
                    order.swap(i, j);
                    improved = true;
                } else {
                    pos.swap(a, b);
                }
            }
        }
    }
    order
}

/// Structure hypotheses `θ̂^α` with their pixel sets and bijections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    d: usize,
    /// Oracle passes per Grover subroutine call.
    k: usize,
    maps: Vec<PhaseMap>,
    pixel_sets: Vec<PixelSet>,
    bijections: Vec<Bijection>,
}

impl CandidateSet {
    pub fn new(maps: Vec<PhaseMap>, k: usize, strategy: BijectionStrategy) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(QemError::InvalidArgument("empty candidate set".into()));
        };
        if k == 0 {
            return Err(QemError::InvalidArgument("k must be at least 1".into()));
        }
        let d = first.d();
        let mut pixel_sets = Vec::with_capacity(maps.len());
        let mut bijections = Vec::with_capacity(maps.len());
        for (alpha, m) in maps.iter().enumerate() {
            if m.d() != d {
                return Err(QemError::InvalidPhaseMap(format!(
                    "candidate {alpha} is {0}x{0}, expected {d}x{d}",
                    m.d()
                )));
            }
            if !m.is_zero_mean() {
                return Err(QemError::InvalidPhaseMap(format!(
                    "candidate {alpha} has mean {}",
                    m.mean()
                )));
            }
            let set = build_pixel_set(m)?;
            bijections.push(build_bijection(&set, strategy));
            pixel_sets.push(set);
        }
        Ok(Self {
            d,
            k,
            maps,
            pixel_sets,
            bijections,
        })
    }

    /// Reads every `*.csv` in `dir`. Files carrying `# alpha=<i>` headers
    /// are placed at index `i`; otherwise files are taken in name order.
    pub fn load_dir(dir: &Path, k: usize, strategy: BijectionStrategy) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        let mut entries = Vec::with_capacity(paths.len());
        for (n, p) in paths.iter().enumerate() {
            let (alpha, map) = PhaseMap::load(p)?;
            entries.push((alpha.unwrap_or(n), map));
        }
        entries.sort_by_key(|(a, _)| *a);
        if entries.iter().enumerate().any(|(i, (a, _))| *a != i) {
            return Err(QemError::Config(format!(
                "candidate indices in {} are not 0..{}",
                dir.display(),
                entries.len()
            )));
        }
        Self::new(entries.into_iter().map(|(_, m)| m).collect(), k, strategy)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (alpha, m) in self.maps.iter().enumerate() {
            m.save(&dir.join(format!("candidate_{alpha:03}.csv")), Some(alpha))?;
        }
        Ok(())
    }

    /// Synthetic benchmark with `n` candidates of side `d`. Each candidate
    /// is `+1` on its pixel set and `−1` elsewhere. The true map is `+π/k`
    /// on the correct candidate's set and `−π/k` elsewhere; every other set
    /// shares exactly half its pixels with the correct one, so its mean
    /// phase is zero. Returns the set, the true map and the correct index.
    pub fn synthetic<R: Rng + ?Sized>(
        d: usize,
        n: usize,
        k: usize,
        strategy: BijectionStrategy,
        rng: &mut R,
    ) -> Result<(Self, PhaseMap, usize)> {
        if !d.is_multiple_of(2) || d == 0 || n == 0 || k == 0 {
            return Err(QemError::InvalidArgument(format!(
                "synthetic set needs even d, n ≥ 1, k ≥ 1 (d={d}, n={n}, k={k})"
            )));
        }
        let half = d * d / 2;
        let quarter = half / 2;
        let distinct = binomial(half, quarter).saturating_mul(binomial(half, quarter));
        if n > distinct.saturating_add(1) {
            return Err(QemError::InvalidArgument(format!(
                "at most {} distinct candidates for d={d}",
                distinct + 1
            )));
        }
        let correct_set: Vec<usize> = (0..half).collect();
        let mut sets = vec![correct_set];
        while sets.len() < n {
            let mut inside: Vec<usize> = (0..half).collect();
            let mut outside: Vec<usize> = (half..d * d).collect();
            inside.shuffle(rng);
            outside.shuffle(rng);
            let mut s: Vec<usize> = inside[..quarter].iter().chain(&outside[..quarter]).copied().collect();
            s.sort_unstable();
            if !sets.contains(&s) {
                sets.push(s);
            }
        }
        let correct = rng.random_range(0..n);
        sets.swap(0, correct);
        let maps = sets
            .iter()
            .map(|s| {
                let mut theta = vec![-1.0; d * d];
                for &i in s {
                    theta[i] = 1.0;
                }
                PhaseMap::new(d, theta)
            })
            .collect::<Result<Vec<_>>>()?;
        let c = PI / k as f64;
        let mut truth = vec![-c; d * d];
        for &i in &sets[correct] {
            truth[i] = c;
        }
        Ok((Self::new(maps, k, strategy)?, PhaseMap::new(d, truth)?, correct))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[PhaseMap] {
        &self.maps
    }

    pub fn pixel_sets(&self) -> &[PixelSet] {
        &self.pixel_sets
    }

    pub fn bijections(&self) -> &[Bijection] {
        &self.bijections
    }

    /// `Θ_α`: the mean of `truth` over each candidate's pixel set.
    pub fn mean_phases(&self, truth: &PhaseMap) -> Vec<f64> {
        self.pixel_sets.iter().map(|s| s.mean_phase(truth)).collect()
    }

    /// Candidates counted as correct: `Θ_α` within 20 % of `π/k`.
    pub fn correct_candidates(&self, truth: &PhaseMap) -> Vec<usize> {
        let target = PI / self.k as f64;
        self.mean_phases(truth)
            .iter()
            .enumerate()
            .filter(|(_, &t)| (t - target).abs() <= 0.2 * target)
            .map(|(a, _)| a)
            .collect()
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Result of one hypothesis round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    /// Post-measurement state of the hypothesis register.
    pub alpha: StateVector,
    pub beta: usize,
    pub beta_probability: f64,
    /// Candidates with nonzero amplitude before the round and none after.
    pub lost: Vec<usize>,
}

const LOST_TOL: f64 = 1e-14;

/// One electron through the hypothesis protocol.
///
/// From `Σ_α a_α|α⟩`, prepares `Σ_α a_α|α⟩ ⊗ Σ_{P_α}|p,q⟩`, makes one oracle
/// call, relabels `(p, q) → β = f_α(p,q)` under control of `α`, applies DFT,
/// `i` on nonzero frequencies and inverse DFT over `β`, then measures `β`.
/// To first order in θ each surviving `a_α` picks up `e^{iΘ_α}`.
pub fn hypothesis_round<R: Rng + ?Sized>(
    alpha: &StateVector,
    truth: &PhaseMap,
    candidates: &CandidateSet,
    mode: &OracleMode,
    rng: &mut R,
    ledger: &mut DoseLedger,
) -> Result<RoundOutcome> {
    if truth.max_abs() > WEAK_PHASE_LIMIT {
        warn!(
            "hypothesis round: max|θ| = {:.3} exceeds the weak-phase limit {WEAK_PHASE_LIMIT}",
            truth.max_abs()
        );
    }
    round(alpha, truth, candidates, mode, rng, ledger)
}

fn round<R: Rng + ?Sized>(
    alpha: &StateVector,
    truth: &PhaseMap,
    candidates: &CandidateSet,
    mode: &OracleMode,
    rng: &mut R,
    ledger: &mut DoseLedger,
) -> Result<RoundOutcome> {
    let n = candidates.len();
    let d = candidates.d();
    if truth.d() != d {
        return Err(QemError::LengthMismatch {
            expected: d,
            got: truth.d(),
        });
    }
    if alpha.layout().dims() != [n] {
        return Err(QemError::InvalidLayout(format!(
            "hypothesis register must be a single subregister of dimension {n}"
        )));
    }
    let half = d * d / 2;
    let a = alpha.amplitudes();
    let scale = 1.0 / (half as f64).sqrt();
    let mut amps = vec![Complex64::new(0.0, 0.0); n * d * d];
    for (al, set) in candidates.pixel_sets().iter().enumerate() {
        for &pix in set.members() {
            amps[al * d * d + pix] = a[al] * scale;
        }
    }
    let layout = RegisterLayout::new([("alpha", n), ("x", d), ("y", d)])?;
    let mut state = StateVector::from_amplitudes(layout, amps)?;

    mode.call(&mut state, [1, 2], truth, rng, ledger)?;

    let perms: Vec<Permutation> = candidates.bijections().iter().map(Bijection::to_permutation).collect();
    state.apply_controlled_permutation(0, &[1, 2], &perms)?;
    let mut state = state.reshape(RegisterLayout::new([("alpha", n), ("flag", 2), ("beta", half)])?)?;
    state.apply_fourier(2, FourierDirection::Forward)?;
    state.apply_diagonal(&[2], &phase_plate(half))?;
    state.apply_fourier(2, FourierDirection::Inverse)?;
    let rec = state.measure(&[1, 2], rng)?;
    let post = state.discard(&[1, 2], rec.outcome)?;

    let before = alpha.probabilities();
    let after = post.probabilities();
    let lost = (0..n)
        .filter(|&i| before[i] > LOST_TOL && after[i] <= LOST_TOL)
        .collect();
    Ok(RoundOutcome {
        alpha: post,
        beta: rec.outcome,
        beta_probability: rec.probability,
        lost,
    })
}

/// Grover search over structure hypotheses. Each iteration runs `k`
/// hypothesis rounds, accumulating `kΘ_α ≈ π` on the correct candidate,
/// then inverts about the mean of the hypothesis register.
/// `iterations` defaults to [`default_structure_iterations`].
pub fn grover_structure_search<R: Rng + ?Sized>(
    candidates: &CandidateSet,
    truth: &PhaseMap,
    iterations: Option<usize>,
    mode: &OracleMode,
    rng: &mut R,
) -> Result<SearchResult> {
    if truth.max_abs() > WEAK_PHASE_LIMIT {
        warn!(
            "structure search: max|θ| = {:.3} exceeds the weak-phase limit {WEAK_PHASE_LIMIT}",
            truth.max_abs()
        );
    }
    let n = candidates.len();
    let correct = candidates.correct_candidates(truth);
    if correct.is_empty() {
        warn!(
            "structure search: no candidate has Θ_α within 20% of π/{}",
            candidates.k()
        );
    }
    let iterations = iterations.unwrap_or_else(|| default_structure_iterations(n));
    let mut alpha = StateVector::uniform(RegisterLayout::new([("alpha", n)])?);
    let mut ledger = DoseLedger::new(candidates.d());
    let mut betas = Vec::with_capacity(iterations * candidates.k());
    let mut lost = Vec::new();
    for _ in 0..iterations {
        for _ in 0..candidates.k() {
            let out = round(&alpha, truth, candidates, mode, rng, &mut ledger)?;
            alpha = out.alpha;
            betas.push(out.beta);
            lost.extend(out.lost);
        }
        alpha.apply_grover_diffusion(&[0])?;
    }
    let probs = alpha.probabilities();
    let success_probability = correct.iter().map(|&a| probs[a]).sum();
    let reported = sample_index(&probs, rng.random::<f64>());
    lost.sort_unstable();
    lost.dedup();
    Ok(SearchResult {
        reported,
        success: reported.is_some_and(|r| correct.contains(&r)),
        success_probability,
        electrons_used: ledger.electrons(),
        ledger,
        beta_outcomes: betas,
        lost_candidates: lost,
    })
}

/// Sequential baseline: each candidate is tested on its own against its
/// complement set. `⌈k/2⌉` rounds on the two-level register
/// `(|P_α⟩ + |P̄_α⟩)/√2` build a relative phase `2⌈k/2⌉Θ_α ≈ π` for the
/// correct candidate, read out in the `±` basis. Costs `N·⌈k/2⌉` electrons.
pub fn classical_structure_search<R: Rng + ?Sized>(
    candidates: &CandidateSet,
    truth: &PhaseMap,
    mode: &OracleMode,
    rng: &mut R,
) -> Result<SearchResult> {
    let correct = candidates.correct_candidates(truth);
    let rounds = candidates.k().div_ceil(2);
    let mut ledger = DoseLedger::new(candidates.d());
    let mut betas = Vec::new();
    let mut lost = Vec::new();
    let mut positives = Vec::new();
    let mut p_flag = Vec::with_capacity(candidates.len());
    for (alpha, map) in candidates.maps().iter().enumerate() {
        let pair = CandidateSet::new(vec![map.clone(), flip(map)], candidates.k(), BijectionStrategy::Raster)?;
        let mut reg = StateVector::uniform(RegisterLayout::new([("alpha", 2)])?);
        for _ in 0..rounds {
            let out = round(&reg, truth, &pair, mode, rng, &mut ledger)?;
            reg = out.alpha;
            betas.push(out.beta);
            if !out.lost.is_empty() {
                lost.push(alpha);
            }
        }
        reg.apply_fourier(0, FourierDirection::Forward)?;
        p_flag.push(reg.marginal(&[0])?[1]);
        if reg.measure(&[0], rng)?.outcome == 1 {
            positives.push(alpha);
        }
    }
    // the flagged candidate with the largest flag probability
    let reported = positives
        .iter()
        .copied()
        .max_by(|&a, &b| p_flag[a].partial_cmp(&p_flag[b]).unwrap_or(Ordering::Equal));
    let success_probability = if correct.len() == 1 {
        let c = correct[0];
        p_flag[c]
            * (0..p_flag.len())
                .filter(|&a| a != c)
                .map(|a| 1.0 - p_flag[a])
                .product::<f64>()
    } else {
        f64::NAN
    };
    lost.dedup();
    Ok(SearchResult {
        reported,
        success: reported.is_some_and(|r| correct.contains(&r)),
        success_probability,
        electrons_used: ledger.electrons(),
        ledger,
        beta_outcomes: betas,
        lost_candidates: lost,
    })
}

fn flip(map: &PhaseMap) -> PhaseMap {
    PhaseMap::new(map.d(), map.as_slice().iter().map(|t| -t).collect()).expect("negation keeps a map valid")
}

/// For each pixel, the fraction of candidates whose pixel set has a member
/// within `radius` of it under `shape`'s metric.
pub fn coverage_score(candidates: &CandidateSet, radius: usize, shape: CollapseShape) -> Vec<f64> {
    let d = candidates.d();
    let n = candidates.len() as f64;
    let mut out = vec![0.0; d * d];
    for set in candidates.pixel_sets() {
        for (i, slot) in out.iter_mut().enumerate() {
            let (p, q) = (i / d, i % d);
            if set
                .coords()
                .any(|(a, b)| shape.contains(a.abs_diff(p), b.abs_diff(q), radius))
            {
                *slot += 1.0 / n;
            }
        }
    }
    out
}
