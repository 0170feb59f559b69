//! The specimen as an oracle.
//!
//! An oracle call is one electron pass: `|p,q⟩ → e^{iθ_pq} |p,q⟩` on the
//! pixel register. [`oracle_call_ideal`] applies that diagonal directly.
//! [`oracle_call_physical`] runs the deflect, transmit, far-field detect and
//! phase-correct pipeline on an explicit electron register, and is where the
//! noise channels act. Both charge the specimen through a [`DoseLedger`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QemError, Result};
use crate::statevec::{sample_index, FourierDirection, StateVector};

/// Tolerance for the zero-sum condition on candidate maps.
pub const ZERO_MEAN_TOL: f64 = 1e-9;

/// `d × d` grid of phase shifts in radians, row-major in `(p, q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    d: usize,
    theta: Vec<f64>,
}

impl PhaseMap {
    pub fn new(d: usize, theta: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(QemError::InvalidPhaseMap("side length must be at least 1".into()));
        }
        if theta.len() != d * d {
            return Err(QemError::LengthMismatch {
                expected: d * d,
                got: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
            return Err(QemError::InvalidPhaseMap(format!(
                "non-finite phase at ({}, {})",
                i / d,
                i % d
            )));
        }
        Ok(Self { d, theta })
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(d, vec![0.0; d * d]).expect("valid zero map")
    }

    pub fn constant(d: usize, value: f64) -> Result<Self> {
        Self::new(d, vec![value; d * d])
    }

    /// Zero everywhere except `value` at `pixel`.
    pub fn single_pixel(d: usize, pixel: (usize, usize), value: f64) -> Result<Self> {
        let mut m = Self::zeros(d);
        m.set(pixel, value)?;
        Ok(m)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.theta[p * self.d + q]
    }

    pub fn set(&mut self, (p, q): (usize, usize), value: f64) -> Result<()> {
        if p >= self.d || q >= self.d {
            return Err(QemError::InvalidPhaseMap(format!(
                "pixel ({p}, {q}) outside a {0}x{0} map",
                self.d
            )));
        }
        if !value.is_finite() {
            return Err(QemError::InvalidPhaseMap("non-finite phase".into()));
        }
        self.theta[p * self.d + q] = value;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn sum(&self) -> f64 {
        self.theta.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.theta.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, t| m.max(t.abs()))
    }

    pub fn is_zero_mean(&self) -> bool {
        self.sum().abs() <= ZERO_MEAN_TOL
    }

    /// The same map with its mean subtracted.
    pub fn zero_mean(&self) -> Self {
        let mean = self.mean();
        Self {
            d: self.d,
            theta: self.theta.iter().map(|t| t - mean).collect(),
        }
    }

    /// Pixels whose phase is nonzero.
    pub fn nonzero_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.theta.len())
            .filter(|&i| self.theta[i] != 0.0)
            .map(|i| (i / self.d, i % self.d))
            .collect()
    }

    /// Parses the CSV form: `d` rows of `d` radians, optionally preceded by a
    /// `# alpha=<index>` line. Other `#` lines are ignored.
    pub fn parse_csv(text: &str, origin: &Path) -> Result<(Option<usize>, Self)> {
        let mut alpha = None;
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.trim().strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("alpha=") {
                    alpha = Some(v.trim().parse::<usize>().map_err(|e| QemError::Parse {
                        path: origin.into(),
                        line: n + 1,
                        msg: format!("bad alpha header: {e}"),
                    })?);
                }
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| QemError::Parse {
                path: origin.into(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| QemError::Parse {
                        path: origin.into(),
                        line,
                        msg: format!("{f:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let d = rows.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(QemError::Parse {
                path: origin.into(),
                line: 0,
                msg: format!("row {bad} has {} columns, expected {d}", rows[bad].len()),
            });
        }
        Ok((alpha, Self::new(d, rows.concat())?))
    }

    pub fn load(path: &Path) -> Result<(Option<usize>, Self)> {
        Self::parse_csv(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_csv(&self, alpha: Option<usize>) -> String {
        let mut out = format!("# phase map, radians: row p, column q, {0}x{0}\n", self.d);
        if let Some(a) = alpha {
            let _ = writeln!(out, "# alpha={a}");
        }
        for row in self.theta.chunks(self.d) {
            let cells: Vec<String> = row.iter().map(|t| format!("{t:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path, alpha: Option<usize>) -> Result<()> {
        std::fs::write(path, self.to_csv(alpha))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollapseShape {
    /// Chebyshev ball: `max(|Δp|, |Δq|) ≤ r`.
    #[default]
    Square,
    /// Euclidean ball: `Δp² + Δq² ≤ r²`.
    Disc,
}

impl CollapseShape {
    pub(crate) fn contains(self, dp: usize, dq: usize, radius: usize) -> bool {
        match self {
            Self::Square => dp.max(dq) <= radius,
            Self::Disc => dp * dp + dq * dq <= radius * radius,
        }
    }
}

/// Per-pass noise of the physical oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Relative amplitude error per pass (standard deviation of η).
    pub amp_error: f64,
    /// Probability that a pass scatters inelastically.
    pub inelastic_prob: f64,
    /// Radius, in pixels, of the region an inelastic event collapses onto.
    pub collapse_radius: usize,
    pub collapse_shape: CollapseShape,
}

impl NoiseConfig {
    pub fn noise_free() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amp_error >= 0.0) || !self.amp_error.is_finite() {
            return Err(QemError::InvalidArgument(format!(
                "amp_error must be finite and >= 0, got {}",
                self.amp_error
            )));
        }
        if !(0.0..=1.0).contains(&self.inelastic_prob) {
            return Err(QemError::InvalidArgument(format!(
                "inelastic_prob must lie in [0, 1], got {}",
                self.inelastic_prob
            )));
        }
        Ok(())
    }

    pub fn is_noise_free(&self) -> bool {
        self.amp_error == 0.0 && self.inelastic_prob == 0.0
    }
}

/// Accumulated real-space detection probability per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseLedger {
    d: usize,
    per_pixel: Vec<f64>,
    electrons: u64,
    /// Largest single-pass total seen so far.
    max_pass_total: f64,
}

impl DoseLedger {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            per_pixel: vec![0.0; d * d],
            electrons: 0,
            max_pass_total: 0.0,
        }
    }

    /// Charges one electron pass with the given per-pixel probabilities.
    pub fn record_pass(&mut self, marginal: &[f64]) -> Result<()> {
        if marginal.len() != self.per_pixel.len() {
            return Err(QemError::LengthMismatch {
                expected: self.per_pixel.len(),
                got: marginal.len(),
            });
        }
        let mut total = 0.0;
        for (acc, &p) in self.per_pixel.iter_mut().zip(marginal) {
            debug_assert!(p >= 0.0);
            *acc += p;
            total += p;
        }
        debug_assert!(total <= 1.0 + 1e-9, "pass deposits {total}");
        self.max_pass_total = self.max_pass_total.max(total);
        self.electrons += 1;
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn per_pixel(&self) -> &[f64] {
        &self.per_pixel
    }

    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.per_pixel[p * self.d + q]
    }

    pub fn electrons(&self) -> u64 {
        self.electrons
    }

    pub fn total_dose(&self) -> f64 {
        self.per_pixel.iter().sum()
    }

    pub fn max_pass_total(&self) -> f64 {
        self.max_pass_total
    }

    /// Adds another ledger of the same geometry into this one.
    pub fn absorb(&mut self, other: &Self) -> Result<()> {
        if other.d != self.d {
            return Err(QemError::LengthMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        for (a, b) in self.per_pixel.iter_mut().zip(&other.per_pixel) {
            *a += b;
        }
        self.electrons += other.electrons;
        self.max_pass_total = self.max_pass_total.max(other.max_pass_total);
        Ok(())
    }
}

/// What a physical oracle call observed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCall {
    /// Far-field detection `(k, l)`.
    pub detected: (usize, usize),
    pub detection_probability: f64,
    /// Center of the collapse region if the pass scattered inelastically.
    pub inelastic_center: Option<(usize, usize)>,
}

fn check_pixel_register(state: &StateVector, xy: [usize; 2], map: &PhaseMap) -> Result<()> {
    let l = state.layout();
    l.joint_dim(&xy)?;
    for &r in &xy {
        if l.dim(r) != map.d() {
            return Err(QemError::LengthMismatch {
                expected: map.d(),
                got: l.dim(r),
            });
        }
    }
    Ok(())
}

/// `|p,q⟩ → e^{iθ_pq}|p,q⟩` on the pixel subregisters `xy = [x, y]`.
pub fn oracle_call_ideal(
    state: &mut StateVector,
    xy: [usize; 2],
    map: &PhaseMap,
    ledger: &mut DoseLedger,
) -> Result<()> {
    check_pixel_register(state, xy, map)?;
    ledger.record_pass(&state.marginal(&xy)?)?;
    state.apply_diagonal_phase(&xy, map.as_slice())
}

/// One electron pass through the full detection pipeline.
///
/// An electron register `(e_x, e_y)` is appended in `|0,0⟩` and set to
/// `|p,q⟩` in the branch where the deflector holds `|p,q⟩`; the specimen
/// imprints `θ_pq` on it; the far field is the 2-D unitary DFT; detection at
/// `(k, l)` leaves `e^{iθ_pq} e^{2πi(kp+lq)/d}` on the deflector, and the
/// known factor `e^{-2πi(kp+lq)/d}` is then undone.
///
/// With `noise.amp_error > 0` the electron amplitudes are perturbed before
/// the far-field transform. With probability `noise.inelastic_prob` the
/// deflector register is collapsed around a sampled pixel before the
/// correction phase.
pub fn oracle_call_physical<R: Rng + ?Sized>(
    state: &mut StateVector,
    xy: [usize; 2],
    map: &PhaseMap,
    noise: &NoiseConfig,
    rng: &mut R,
    ledger: &mut DoseLedger,
) -> Result<PhysicalCall> {
    physical_call(state, xy, map, noise, rng, ledger, None)
}

/// [`oracle_call_physical`] with the far-field outcome fixed to `detected`.
pub fn oracle_call_physical_forced<R: Rng + ?Sized>(
    state: &mut StateVector,
    xy: [usize; 2],
    map: &PhaseMap,
    noise: &NoiseConfig,
    rng: &mut R,
    ledger: &mut DoseLedger,
    detected: (usize, usize),
) -> Result<PhysicalCall> {
    physical_call(state, xy, map, noise, rng, ledger, Some(detected))
}

fn physical_call<R: Rng + ?Sized>(
    state: &mut StateVector,
    xy: [usize; 2],
    map: &PhaseMap,
    noise: &NoiseConfig,
    rng: &mut R,
    ledger: &mut DoseLedger,
    forced: Option<(usize, usize)>,
) -> Result<PhysicalCall> {
    check_pixel_register(state, xy, map)?;
    noise.validate()?;
    let d = map.d();
    if let Some((k, l)) = forced {
        if k >= d || l >= d {
            return Err(QemError::InvalidArgument(format!(
                "detection ({k}, {l}) outside {d}x{d}"
            )));
        }
    }
    ledger.record_pass(&state.marginal(&xy)?)?;

    let n = state.layout().len();
    let electron = [n, n + 1];
    let mut ext = state.extend([("electron_x", d), ("electron_y", d)])?;
    copy_entangle(&mut ext, xy, d);
    ext.apply_diagonal_phase(&electron, map.as_slice())?;
    if noise.amp_error > 0.0 {
        apply_amplitude_perturbation(&mut ext, &electron, noise.amp_error, rng)?;
    }
    ext.apply_fourier(electron[0], FourierDirection::Forward)?;
    ext.apply_fourier(electron[1], FourierDirection::Forward)?;
    let rec = match forced {
        Some((k, l)) => ext.measure_forced(&electron, k * d + l)?,
        None => ext.measure(&electron, rng)?,
    };
    *state = ext.discard(&electron, rec.outcome)?;
    let (k, l) = (rec.outcome / d, rec.outcome % d);

    let inelastic_center = if noise.inelastic_prob > 0.0 && rng.random::<f64>() < noise.inelastic_prob {
        Some(apply_inelastic_event(
            state,
            xy,
            noise.collapse_radius,
            noise.collapse_shape,
            rng,
        )?)
    } else {
        None
    };

    let correction: Vec<f64> = (0..d * d)
        .map(|i| {
            let (p, q) = (i / d, i % d);
            -2.0 * PI * ((k * p + l * q) % d) as f64 / d as f64
        })
        .collect();
    state.apply_diagonal_phase(&xy, &correction)?;

    Ok(PhysicalCall {
        detected: (k, l),
        detection_probability: rec.probability,
        inelastic_center,
    })
}

/// Deflector action `|0,0⟩_e ⊗ |p,q⟩ → |p,q⟩_e ⊗ |p,q⟩`, for a state whose
/// last two subregisters are the freshly appended electron register.
fn copy_entangle(ext: &mut StateVector, xy: [usize; 2], d: usize) {
    let strides = ext.layout().strides();
    let block = d * d;
    let total = ext.layout().total_dim();
    let amps = ext.amps_mut();
    for base in (0..total).step_by(block) {
        let p = (base / strides[xy[0]]) % d;
        let q = (base / strides[xy[1]]) % d;
        let target = base + p * d + q;
        if target != base {
            amps[target] = amps[base];
            amps[base] = Complex64::new(0.0, 0.0);
        }
    }
}

/// Collapses the pixel register onto a neighbourhood of a location drawn
/// from its marginal. Returns the location.
pub fn apply_inelastic_event<R: Rng + ?Sized>(
    state: &mut StateVector,
    xy: [usize; 2],
    radius: usize,
    shape: CollapseShape,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let marginal = state.marginal(&xy)?;
    let d = state.layout().dim(xy[1]);
    let i = sample_index(&marginal, rng.random::<f64>()).ok_or(QemError::ZeroNorm("inelastic event on zero state"))?;
    let center = (i / d, i % d);
    apply_inelastic_event_at(state, xy, radius, shape, center)?;
    Ok(center)
}

/// Collapse around a given center; amplitudes outside the ball are zeroed
/// and the rest renormalized.
pub fn apply_inelastic_event_at(
    state: &mut StateVector,
    xy: [usize; 2],
    radius: usize,
    shape: CollapseShape,
    (p0, q0): (usize, usize),
) -> Result<()> {
    state.layout().joint_dim(&xy)?;
    let (dx, dy) = (state.layout().dim(xy[0]), state.layout().dim(xy[1]));
    let mask: Vec<Complex64> = (0..dx * dy)
        .map(|i| {
            let (p, q) = (i / dy, i % dy);
            let inside = shape.contains(p.abs_diff(p0), q.abs_diff(q0), radius);
            Complex64::new(if inside { 1.0 } else { 0.0 }, 0.0)
        })
        .collect();
    state.apply_diagonal(&xy, &mask)?;
    let n = state.norm();
    if n < 1e-12 {
        return Err(QemError::ZeroNorm("inelastic collapse removed all amplitude"));
    }
    state.normalize()
}

/// Multiplies the amplitude of each joint index of `targets` by `1 + η`,
/// `η ~ N(0, sigma²)` i.i.d., then renormalizes. Returns the draws.
pub fn apply_amplitude_perturbation<R: Rng + ?Sized>(
    state: &mut StateVector,
    targets: &[usize],
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(QemError::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let joint = state.layout().joint_dim(targets)?;
    if sigma == 0.0 {
        return Ok(vec![0.0; joint]);
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    let eta: Vec<f64> = (0..joint).map(|_| normal.sample(rng)).collect();
    let factors: Vec<Complex64> = eta.iter().map(|e| Complex64::new(1.0 + e, 0.0)).collect();
    state.apply_diagonal(targets, &factors)?;
    state.normalize()?;
    Ok(eta)
}

/// Which oracle implementation an algorithm drives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleMode {
    Ideal,
    Physical(NoiseConfig),
}

impl Default for OracleMode {
    fn default() -> Self {
        Self::Physical(NoiseConfig::default())
    }
}

impl OracleMode {
    pub fn call<R: Rng + ?Sized>(
        &self,
        state: &mut StateVector,
        xy: [usize; 2],
        map: &PhaseMap,
        rng: &mut R,
        ledger: &mut DoseLedger,
    ) -> Result<Option<PhysicalCall>> {
        match self {
            Self::Ideal => oracle_call_ideal(state, xy, map, ledger).map(|_| None),
            Self::Physical(noise) => oracle_call_physical(state, xy, map, noise, rng, ledger).map(Some),
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        match self {
            Self::Ideal => NoiseConfig::default(),
            Self::Physical(n) => *n,
        }
    }
}
