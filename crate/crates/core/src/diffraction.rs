//! Amplitude error on the diffraction plane from high-angle elastic
//! scattering.
//!
//! Scattered intensity `S(θ)` is the density-weighted mean of per-element
//! differential cross sections, normalized to the scattering probability
//! `p_S`. A gaussian incident profile `I(θ)` with amplitude `ψ = √I` is
//! convolved with `S` on the sphere; the antisymmetric part of that
//! convolution, `Var(B)`, is the part that does not interfere coherently
//! with the transmitted beam `T = (1 − p_S)·I`.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QemError, Result};

pub const ELEMENTS: [&str; 5] = ["H", "C", "N", "O", "S"];
pub const ATOMIC_NUMBERS: [u32; 5] = [1, 6, 7, 8, 16];

/// Default azimuthal step count over `[0, π]`.
pub const PHI_STEPS: usize = 100;

/// Midpoint cells over `φ` that keep the arc step at or below `σ` anywhere
/// on the sphere: `max(PHI_STEPS, ⌈π/σ⌉)`. [`PHI_STEPS`] alone resolves the
/// beam only for `σ ≳ 31 mrad` once `S` carries weight at large angles.
pub fn phi_steps_for(sigma: f64) -> usize {
    PHI_STEPS.max((PI / sigma).ceil() as usize)
}

const TABLE_FORMAT: &str = "CSV with header `theta_rad,H,C,N,O,S`, dσ/dΩ in nm²/sr on an ascending grid in [0, π], \
     and an optional `# total_nm2: H=<σ>,C=<σ>,N=<σ>,O=<σ>,S=<σ>` line";

/// Trapezoid rule on a nonuniform grid.
pub fn trapezoid(y: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(y.len(), x.len());
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| 0.5 * (y[0] + y[1]) * (x[1] - x[0]))
        .sum()
}

/// `∫ f(θ) 2π sinθ dθ` on the grid.
pub fn sphere_integral(f: &[f64], theta: &[f64]) -> f64 {
    let w: Vec<f64> = f.iter().zip(theta).map(|(f, t)| 2.0 * PI * t.sin() * f).collect();
    trapezoid(&w, theta)
}

/// Per-element elastic cross sections on a shared angle grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionTable {
    theta: Vec<f64>,
    /// `dσ/dΩ` in nm²/sr, indexed like [`ELEMENTS`].
    dcs: [Vec<f64>; 5],
    /// Total cross sections in nm².
    totals: [f64; 5],
    source: String,
}

impl CrossSectionTable {
    /// Totals default to the grid integral of `dσ/dΩ` when not given.
    pub fn new(
        theta: Vec<f64>,
        dcs: [Vec<f64>; 5],
        totals: Option<[f64; 5]>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if theta.len() < 2 {
            return Err(QemError::InvalidArgument(
                "cross-section grid needs at least two angles".into(),
            ));
        }
        if theta.windows(2).any(|w| w[1] <= w[0]) || theta[0] < 0.0 || *theta.last().unwrap() > PI + 1e-9 {
            return Err(QemError::InvalidArgument(
                "cross-section grid must ascend strictly within [0, π]".into(),
            ));
        }
        for (e, col) in ELEMENTS.iter().zip(&dcs) {
            if col.len() != theta.len() {
                return Err(QemError::LengthMismatch {
                    expected: theta.len(),
                    got: col.len(),
                });
            }
            if col.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(QemError::InvalidArgument(format!(
                    "negative or non-finite dσ/dΩ for {e}"
                )));
            }
        }
        let totals = match totals {
            Some(t) => {
                if t.iter().any(|v| !(*v >= 0.0)) {
                    return Err(QemError::InvalidArgument("negative total cross section".into()));
                }
                t
            }
            None => std::array::from_fn(|i| sphere_integral(&dcs[i], &theta)),
        };
        Ok(Self {
            theta,
            dcs,
            totals,
            source: source.into(),
        })
    }

    /// Every element scatters isotropically with `dσ/dΩ = value`.
    pub fn isotropic(theta: Vec<f64>, value: f64) -> Result<Self> {
        let col = vec![value; theta.len()];
        Self::new(theta, std::array::from_fn(|_| col.clone()), None, "isotropic")
    }

    /// Screened-Rutherford (Wentzel) cross sections at 300 keV on
    /// [`default_grid`]. Stands in for tabulated data when none is supplied.
    pub fn screened_rutherford() -> Self {
        let theta = default_grid();
        let dcs = std::array::from_fn(|i| theta.iter().map(|&t| wentzel_dcs(ATOMIC_NUMBERS[i], t)).collect());
        Self::new(theta, dcs, None, "screened Rutherford, 300 keV").expect("model table is valid")
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| QemError::Parse {
            path: origin.into(),
            line,
            msg,
        };
        let mut totals = None;
        for (n, line) in text.lines().enumerate() {
            let Some(rest) = line.trim().strip_prefix('#') else {
                continue;
            };
            let Some(list) = rest.trim().strip_prefix("total_nm2:") else {
                continue;
            };
            let mut t = [f64::NAN; 5];
            for item in list.split(',') {
                let (name, v) = item
                    .split_once('=')
                    .ok_or_else(|| parse_err(n + 1, format!("expected <element>=<value>, got {item:?}")))?;
                let i =
                    element_index(name.trim()).ok_or_else(|| parse_err(n + 1, format!("unknown element {name:?}")))?;
                t[i] = v.trim().parse().map_err(|e| parse_err(n + 1, format!("{v:?}: {e}")))?;
            }
            if t.iter().any(|v| v.is_nan()) {
                return Err(parse_err(n + 1, "totals must list H, C, N, O and S".into()));
            }
            totals = Some(t);
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let col_of = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let theta_col = col_of("theta_rad").ok_or_else(|| parse_err(1, "missing theta_rad column".into()))?;
        let mut cols = [0usize; 5];
        for (slot, e) in cols.iter_mut().zip(ELEMENTS) {
            *slot = col_of(e).ok_or_else(|| parse_err(1, format!("missing {e} column")))?;
        }
        let mut theta = Vec::new();
        let mut dcs: [Vec<f64>; 5] = Default::default();
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let field = |c: usize| -> Result<f64> {
                let f = rec.get(c).ok_or_else(|| parse_err(line, "short row".into()))?;
                f.parse().map_err(|e| parse_err(line, format!("{f:?}: {e}")))
            };
            theta.push(field(theta_col)?);
            for (col, &c) in dcs.iter_mut().zip(&cols) {
                col.push(field(c)?);
            }
        }
        Self::new(theta, dcs, totals, origin.display().to_string())
    }

    /// Loads a table; a missing file is reported as [`QemError::DataRequired`].
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(QemError::DataRequired {
                what: format!("elastic cross-section table {}", path.display()),
                format: TABLE_FORMAT.into(),
            });
        }
        Self::parse_csv(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# total_nm2: ");
        let totals: Vec<String> = ELEMENTS
            .iter()
            .zip(&self.totals)
            .map(|(e, t)| format!("{e}={t:?}"))
            .collect();
        out.push_str(&totals.join(","));
        out.push_str("\ntheta_rad,H,C,N,O,S\n");
        for (i, t) in self.theta.iter().enumerate() {
            out.push_str(&format!("{t:?}"));
            for col in &self.dcs {
                out.push_str(&format!(",{:?}", col[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn dcs(&self, element: usize) -> &[f64] {
        &self.dcs[element]
    }

    pub fn totals(&self) -> &[f64; 5] {
        &self.totals
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

fn element_index(name: &str) -> Option<usize> {
    ELEMENTS.iter().position(|e| e.eq_ignore_ascii_case(name))
}

/// 0, 400 geometric points on `[1e-5, 0.2]`, then a linear tail to `π`:
/// 601 angles, densest near the axis.
pub fn default_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    let (lo, hi, n) = (1e-5f64, 0.2f64, 400);
    let r = (hi / lo).ln() / (n - 1) as f64;
    g.extend((0..n).map(|i| lo * (r * i as f64).exp()));
    let tail = 200;
    g.extend((1..=tail).map(|i| hi + (PI - hi) * i as f64 / tail as f64));
    *g.last_mut().unwrap() = PI;
    g
}

/// Wentzel screened-Rutherford `dσ/dΩ` in nm²/sr for a 300 keV electron.
pub fn wentzel_dcs(z: u32, theta: f64) -> f64 {
    const BOHR_NM: f64 = 0.052_917_721;
    const WAVELENGTH_NM: f64 = 1.968_75e-3;
    const GAMMA: f64 = 1.0 + 300.0 / 510.999;
    let k = 2.0 * PI / WAVELENGTH_NM;
    let z = z as f64;
    let screening = BOHR_NM * z.powf(-1.0 / 3.0);
    let theta0 = 1.0 / (k * screening);
    let q = 2.0 * (theta / 2.0).sin();
    4.0 * GAMMA * GAMMA * z * z / (BOHR_NM * BOHR_NM * k.powi(4)) / (q * q + theta0 * theta0).powi(2)
}

/// Number densities per nm³ and specimen thickness in nm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub n_h: f64,
    pub n_c: f64,
    pub n_n: f64,
    pub n_o: f64,
    pub n_s: f64,
    pub thickness_nm: f64,
}

impl Default for Composition {
    /// Hydrated protein at roughly 1.1 g/cm³.
    fn default() -> Self {
        Self {
            n_h: 60.0,
            n_c: 20.0,
            n_n: 5.0,
            n_o: 25.0,
            n_s: 0.3,
            thickness_nm: 30.0,
        }
    }
}

impl Composition {
    pub fn densities(&self) -> [f64; 5] {
        [self.n_h, self.n_c, self.n_n, self.n_o, self.n_s]
    }

    pub fn validate(&self) -> Result<()> {
        if self.densities().iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
            return Err(QemError::InvalidArgument(
                "number densities must be finite and >= 0".into(),
            ));
        }
        if !(self.thickness_nm > 0.0) {
            return Err(QemError::InvalidArgument("thickness must be > 0".into()));
        }
        Ok(())
    }
}

/// Elastic scattering probability per nm: `Σ n_e σ_e`.
pub fn elastic_rate(table: &CrossSectionTable, composition: &Composition) -> Result<f64> {
    composition.validate()?;
    Ok(composition
        .densities()
        .iter()
        .zip(table.totals())
        .map(|(n, s)| n * s)
        .sum())
}

/// Linear thickness law `p_S = rate · t`.
pub fn scattering_probability(rate_per_nm: f64, thickness_nm: f64) -> f64 {
    rate_per_nm * thickness_nm
}

/// `S(θ)` on the table grid, normalized so `∫ S 2π sinθ dθ = p_S`.
pub fn scatter_profile(table: &CrossSectionTable, composition: &Composition, p_s: f64) -> Result<Vec<f64>> {
    composition.validate()?;
    if !(0.0..1.0).contains(&p_s) {
        return Err(QemError::InvalidArgument(format!("p_S must lie in [0, 1), got {p_s}")));
    }
    let n = composition.densities();
    let raw: Vec<f64> = (0..table.theta().len())
        .map(|i| (0..5).map(|e| n[e] * table.dcs(e)[i]).sum())
        .collect();
    if p_s == 0.0 {
        return Ok(vec![0.0; raw.len()]);
    }
    let norm = sphere_integral(&raw, table.theta());
    if !(norm > 0.0) {
        return Err(QemError::ZeroNorm("scattered profile vanishes everywhere"));
    }
    Ok(raw.into_iter().map(|s| s * p_s / norm).collect())
}

/// Gaussian incident profile with characteristic angle `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamProfile {
    sigma: f64,
}

impl BeamProfile {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(QemError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `I(θ) = e^{−θ²/2σ²} / (2πσ²)`, unit mass in the small-angle measure `2πθ dθ`.
    pub fn intensity(&self, theta: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (-theta * theta / (2.0 * s2)).exp() / (2.0 * PI * s2)
    }

    /// `ψ = √I`, real and nonnegative.
    pub fn amplitude(&self, theta: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (-theta * theta / (4.0 * s2)).exp() / ((2.0 * PI).sqrt() * self.sigma)
    }

    /// `T(θ) = (1 − p_S)·I(θ)`.
    pub fn transmitted(&self, theta: f64, p_s: f64) -> f64 {
        (1.0 - p_s) * self.intensity(theta)
    }
}

/// Great-circle distance between `(θ, 0)` and `(θ̂, φ̂)`, in `[0, π]`.
pub fn spherical_distance(theta: f64, theta_hat: f64, phi_hat: f64) -> f64 {
    let c = theta.cos() * theta_hat.cos() + theta.sin() * theta_hat.sin() * phi_hat.cos();
    c.clamp(-1.0, 1.0).acos()
}

/// Convolution sums at one θ: `Var(B)` and the full intensity
/// `∫ S·I(d) dΩ̂`.
fn convolve_at(theta: f64, grid: &[f64], s: &[f64], beam: &BeamProfile, cos_phi: &[f64], dphi: f64) -> (f64, f64) {
    let (ct, st) = (theta.cos(), theta.sin());
    let mut var_b = Vec::with_capacity(grid.len());
    let mut total = Vec::with_capacity(grid.len());
    for (&th, &sv) in grid.iter().zip(s) {
        let (ch, sh) = (th.cos(), th.sin());
        if sv == 0.0 || sh == 0.0 {
            var_b.push(0.0);
            total.push(0.0);
            continue;
        }
        let (mut b, mut a) = (0.0, 0.0);
        for &cp in cos_phi {
            let x = st * sh * cp;
            let d1 = (ct * ch + x).clamp(-1.0, 1.0).acos();
            let d2 = (ct * ch - x).clamp(-1.0, 1.0).acos();
            let (p1, p2) = (beam.amplitude(d1), beam.amplitude(d2));
            b += (p1 - p2) * (p1 - p2);
            a += p1 * p1 + p2 * p2;
        }
        var_b.push(sh * sv / 2.0 * b * dphi);
        total.push(sh * sv * a * dphi);
    }
    (trapezoid(&var_b, grid), trapezoid(&total, grid))
}

fn convolve(grid: &[f64], s: &[f64], beam: &BeamProfile, phi_steps: usize) -> (Vec<f64>, Vec<f64>) {
    let dphi = PI / phi_steps as f64;
    let cos_phi: Vec<f64> = (0..phi_steps).map(|j| ((j as f64 + 0.5) * dphi).cos()).collect();
    grid.par_iter()
        .map(|&t| convolve_at(t, grid, s, beam, &cos_phi, dphi))
        .unzip()
}

/// `Var(B)(θ) = ∫ sinθ̂ dθ̂ ∫₀^π dφ̂ (S(θ̂)/2)[ψ(d₁) − ψ(d₂)]²` on the grid:
/// trapezoid over `θ̂`, midpoint over `φ̂` with `phi_steps` cells.
pub fn variance_b(grid: &[f64], s: &[f64], beam: &BeamProfile, phi_steps: usize) -> Vec<f64> {
    convolve(grid, s, beam, phi_steps).0
}

/// `E = √(Var(B) / (Var(B) + T))`. Zero where `Var(B) = 0`, one where
/// `T` has underflowed but `Var(B)` has not.
pub fn relative_error(var_b: f64, t: f64) -> f64 {
    if var_b <= 0.0 {
        0.0
    } else if t <= 0.0 {
        1.0
    } else {
        (var_b / (var_b + t)).sqrt()
    }
}

/// Checks of the quadrature against the scattering probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationResiduals {
    /// `∫ S 2π sinθ dθ`.
    pub scatter_integral: f64,
    /// `∫ |ψ_S|² dΩ`, the sphere integral of the convolved intensity.
    pub convolved_integral: f64,
    /// `|convolved_integral − p_S| / p_S`; zero when `p_S = 0`.
    pub relative: f64,
}

fn residuals(grid: &[f64], s: &[f64], convolved: &[f64], p_s: f64) -> NormalizationResiduals {
    let convolved_integral = sphere_integral(convolved, grid);
    NormalizationResiduals {
        scatter_integral: sphere_integral(s, grid),
        convolved_integral,
        relative: if p_s > 0.0 {
            (convolved_integral - p_s).abs() / p_s
        } else {
            0.0
        },
    }
}

/// `∫|ψ_S|² dΩ = ∫ (Var A + Var B) dΩ` versus `p_S`.
pub fn normalization_check(
    grid: &[f64],
    s: &[f64],
    beam: &BeamProfile,
    p_s: f64,
    phi_steps: usize,
) -> NormalizationResiduals {
    if phi_steps < phi_steps_for(beam.sigma()) {
        warn!(
            "normalization check: {phi_steps} φ cells under-resolve σ = {:.3} rad away from the axis; use {}",
            beam.sigma(),
            phi_steps_for(beam.sigma())
        );
    }
    let (_, convolved) = convolve(grid, s, beam, phi_steps);
    residuals(grid, s, &convolved, p_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeErrorResult {
    pub p_s: f64,
    pub sigma: f64,
    pub theta: Vec<f64>,
    pub e_curve: Vec<f64>,
    pub var_b: Vec<f64>,
    pub transmitted: Vec<f64>,
    pub scattered: Vec<f64>,
    /// `∫ 2π sinθ E (T + S) dθ`.
    pub e_a: f64,
    pub residuals: NormalizationResiduals,
}

#[derive(Serialize)]
struct CurveRow {
    theta_rad: f64,
    #[serde(rename = "E")]
    e: f64,
    #[serde(rename = "VarB")]
    var_b: f64,
    #[serde(rename = "T")]
    t: f64,
    #[serde(rename = "S")]
    s: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    p_s: f64,
    sigma: f64,
    e_a: f64,
    residuals: &'a NormalizationResiduals,
}

impl AmplitudeErrorResult {
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        for i in 0..self.theta.len() {
            w.serialize(CurveRow {
                theta_rad: self.theta[i],
                e: self.e_curve[i],
                var_b: self.var_b[i],
                t: self.transmitted[i],
                s: self.scattered[i],
            })
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::to_value(Summary {
            p_s: self.p_s,
            sigma: self.sigma,
            e_a: self.e_a,
            residuals: &self.residuals,
        })
        .expect("summary serializes")
    }
}

pub(crate) fn csv_io(e: csv::Error) -> QemError {
    QemError::Io(std::io::Error::other(e))
}

/// Runs the whole pipeline for one `(S, σ)` pair.
pub fn amplitude_error(
    grid: &[f64],
    s: &[f64],
    beam: &BeamProfile,
    p_s: f64,
    phi_steps: usize,
) -> Result<AmplitudeErrorResult> {
    if grid.len() != s.len() {
        return Err(QemError::LengthMismatch {
            expected: grid.len(),
            got: s.len(),
        });
    }
    if phi_steps == 0 {
        return Err(QemError::InvalidArgument("phi_steps must be at least 1".into()));
    }
    let (var_b, convolved) = convolve(grid, s, beam, phi_steps);
    let transmitted: Vec<f64> = grid.iter().map(|&t| beam.transmitted(t, p_s)).collect();
    let e_curve: Vec<f64> = var_b
        .iter()
        .zip(&transmitted)
        .map(|(&v, &t)| relative_error(v, t))
        .collect();
    let weight: Vec<f64> = (0..grid.len()).map(|i| e_curve[i] * (transmitted[i] + s[i])).collect();
    let e_a = sphere_integral(&weight, grid);
    Ok(AmplitudeErrorResult {
        p_s,
        sigma: beam.sigma(),
        theta: grid.to_vec(),
        e_curve,
        var_b,
        transmitted,
        scattered: s.to_vec(),
        e_a,
        residuals: residuals(grid, s, &convolved, p_s),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastFactor {
    /// `e_A·√(8k)`.
    pub argument: f64,
    /// `cos(e_A·√(8k))`.
    pub value: f64,
    /// False once the argument reaches `π/2`.
    pub meaningful: bool,
}

/// Contrast retained after `k` passes accumulate amplitude error `e_A` in
/// random-walk fashion.
pub fn contrast_factor(e_a: f64, k: usize) -> ContrastFactor {
    let argument = e_a * (8.0 * k as f64).sqrt();
    let meaningful = argument < PI / 2.0;
    if !meaningful {
        warn!("contrast factor: e_A·√(8k) = {argument:.3} ≥ π/2; contrast is lost");
    }
    ContrastFactor {
        argument,
        value: argument.cos(),
        meaningful,
    }
}
