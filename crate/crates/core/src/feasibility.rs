//! Order-of-magnitude estimates for a superconducting beam deflector:
//! the deflection condition and the back-action of a passing electron on
//! an LC resonator.
//!
//! Each back-action quantity is reported twice. `formal` evaluates the
//! full expression; `reduced` drops factors of order one the way a rough
//! estimate would. Flux ratios in the back-action report use `h/e`.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{QemError, Result};

/// SI constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub h: f64,
    pub e: f64,
    pub c: f64,
    pub mu0: f64,
    pub eps0: f64,
    pub alpha: f64,
}

/// CODATA 2018 recommended values.
pub const CODATA_2018: PhysicalConstants = PhysicalConstants {
    h: 6.626_070_15e-34,
    e: 1.602_176_634e-19,
    c: 299_792_458.0,
    mu0: 1.256_637_062_12e-6,
    eps0: 8.854_187_812_8e-12,
    alpha: 7.297_352_569_3e-3,
};

impl Default for PhysicalConstants {
    fn default() -> Self {
        CODATA_2018
    }
}

impl PhysicalConstants {
    pub fn hbar(&self) -> f64 {
        self.h / (2.0 * PI)
    }

    /// von Klitzing constant `h/e²`.
    pub fn r_k(&self) -> f64 {
        self.h / (self.e * self.e)
    }

    /// Vacuum impedance `μ₀c`.
    pub fn z0(&self) -> f64 {
        self.mu0 * self.c
    }

    /// Superconducting flux quantum `h/2e`.
    pub fn phi0(&self) -> f64 {
        self.h / (2.0 * self.e)
    }

    /// Single-electron flux quantum `h/e`.
    pub fn phi0_single(&self) -> f64 {
        self.h / self.e
    }
}

/// Lumped LC resonator and the single length scale of its interaction
/// with the beam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    /// Henry.
    pub inductance: f64,
    /// Farad.
    pub capacitance: f64,
    /// Meters.
    pub length: f64,
}

impl CircuitParams {
    pub fn new(inductance: f64, capacitance: f64, length: f64) -> Result<Self> {
        let p = Self {
            inductance,
            capacitance,
            length,
        };
        p.validate()?;
        Ok(p)
    }

    /// `L = μ₀l`, `C = ε₀l`, so `Z = Z₀` and `ω = c/l`.
    pub fn free_space(length: f64, k: &PhysicalConstants) -> Result<Self> {
        Self::new(k.mu0 * length, k.eps0 * length, length)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("length", self.length),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(QemError::InvalidArgument(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        1.0 / (self.inductance * self.capacitance).sqrt()
    }

    pub fn impedance(&self) -> f64 {
        (self.inductance / self.capacitance).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deflection {
    /// `φ / (h/2e)`.
    pub ratio: f64,
    /// `ratio ≥ 1`.
    pub satisfied: bool,
    /// `Δp/p = eφ/(pw)`.
    pub momentum_kick: f64,
    /// `λ/w = h/(pw)`.
    pub diffraction_spread: f64,
    /// `(Δp/p)/(λ/w) = eφ/h = φ/(h/e)`, independent of `p` and `w`.
    pub quotient: f64,
}

/// Ratio of a flux `φ` (Wb) to `h/2e` and whether the condition `φ ≳ φ₀` holds.
pub fn deflection_ratio(phi: f64, k: &PhysicalConstants) -> (f64, bool) {
    let r = phi / k.phi0();
    (r, r >= 1.0)
}

/// Full deflection estimate for flux `phi` (Wb), electron momentum
/// `momentum` (kg·m/s) and deflector width `width` (m).
pub fn deflection(phi: f64, momentum: f64, width: f64, k: &PhysicalConstants) -> Result<Deflection> {
    if !(phi >= 0.0) || !(momentum > 0.0) || !(width > 0.0) {
        return Err(QemError::InvalidArgument("need φ ≥ 0, p > 0, w > 0".into()));
    }
    let (ratio, satisfied) = deflection_ratio(phi, k);
    let momentum_kick = k.e * phi / (momentum * width);
    let diffraction_spread = k.h / (momentum * width);
    Ok(Deflection {
        ratio,
        satisfied,
        momentum_kick,
        diffraction_spread,
        quotient: momentum_kick / diffraction_spread,
    })
}

/// Relativistic momentum of an electron with kinetic energy `kev`.
pub fn electron_momentum(kev: f64, k: &PhysicalConstants) -> f64 {
    const REST_KEV: f64 = 510.998_950_00;
    let pc_kev = (kev * (kev + 2.0 * REST_KEV)).sqrt();
    pc_kev * 1e3 * k.e / k.c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub formal: f64,
    pub reduced: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackActionReport {
    pub impedance_ohm: f64,
    pub omega_rad_s: f64,
    /// `ωτ` with `τ = l/c`.
    pub omega_tau: f64,
    /// Ground-state charge fluctuation in units of `e`.
    pub delta_q: Estimate,
    /// Ground-state flux fluctuation in units of `h/e`.
    pub delta_phi: Estimate,
    /// Flux applied by the passing electron in units of `h/e`.
    pub phi_applied: Estimate,
    pub p_ex_magnetic: Estimate,
    pub p_ex_electric: Estimate,
    /// Whether either formal probability was clamped to 1.
    pub clamped: bool,
}

/// `δq/e`: formal `√(R_K/(4πZ))`, reduced `√(R_K/Z)`.
pub fn charge_fluctuation(p: &CircuitParams, k: &PhysicalConstants) -> Estimate {
    let z = p.impedance();
    Estimate {
        formal: (k.r_k() / (4.0 * PI * z)).sqrt(),
        reduced: (k.r_k() / z).sqrt(),
    }
}

/// `δφ/(h/e)`: formal `√(Z/(4πR_K))`, reduced `√(Z/R_K)`.
pub fn flux_fluctuation(p: &CircuitParams, k: &PhysicalConstants) -> Estimate {
    let z = p.impedance();
    Estimate {
        formal: (z / (4.0 * PI * k.r_k())).sqrt(),
        reduced: (z / k.r_k()).sqrt(),
    }
}

/// Flux of an electron passing at speed `c` and distance `l`:
/// `B ≈ eZ₀/l²` over area `l²`, so `φ_a ≈ eZ₀`. In units of `h/e` that is
/// `Z₀/R_K`; the reduced form is `α`.
pub fn applied_flux(k: &PhysicalConstants) -> Estimate {
    Estimate {
        formal: k.e * k.z0() / k.phi0_single(),
        reduced: k.alpha,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExcitationMode {
    Magnetic,
    Electric,
}

/// First-order excitation probability `|0⟩ → |1⟩` for a kick of duration
/// `τ = l/c`.
///
/// Magnetic, flux `phi_a` (Wb): `φ_a²Z/(2ħL²) · (2/ω²)(1 − cos ωτ)`.
/// Electric, charge `q_a` (C): `q_a²/(2ZħC²) · (2/ω²)(1 − cos ωτ)`.
/// The reduced forms drop the `π` and the time factor relative to `τ²`
/// under `L/τ ≈ Z₀` and `C/τ ≈ 1/Z₀`: `(φ_a/eZ₀)²·Z/R_K` and
/// `(q_a/e)²·Z₀²/(Z·R_K)`. Formal values above 1 are clamped.
pub fn excitation_probability(
    p: &CircuitParams,
    mode: ExcitationMode,
    source: f64,
    k: &PhysicalConstants,
) -> (Estimate, bool) {
    let z = p.impedance();
    let w = p.omega();
    let tau = p.length / k.c;
    let time = 2.0 / (w * w) * (1.0 - (w * tau).cos());
    let (raw, reduced) = match mode {
        ExcitationMode::Magnetic => (
            source * source * z / (2.0 * k.hbar() * p.inductance * p.inductance) * time,
            (source / (k.e * k.z0())).powi(2) * z / k.r_k(),
        ),
        ExcitationMode::Electric => (
            source * source / (2.0 * z * k.hbar() * p.capacitance * p.capacitance) * time,
            (source / k.e).powi(2) * k.z0() * k.z0() / (z * k.r_k()),
        ),
    };
    let clamped = raw > 1.0;
    if clamped {
        warn!("{mode:?} excitation probability {raw:.3} exceeds 1; first-order perturbation theory does not apply");
    }
    (
        Estimate {
            formal: raw.min(1.0),
            reduced,
        },
        clamped,
    )
}

/// Back-action of one electron with the default sources `φ_a = eZ₀` and `q_a = e`.
pub fn back_action(p: &CircuitParams, k: &PhysicalConstants) -> Result<BackActionReport> {
    p.validate()?;
    let (p_ex_magnetic, cm) = excitation_probability(p, ExcitationMode::Magnetic, k.e * k.z0(), k);
    let (p_ex_electric, ce) = excitation_probability(p, ExcitationMode::Electric, k.e, k);
    Ok(BackActionReport {
        impedance_ohm: p.impedance(),
        omega_rad_s: p.omega(),
        omega_tau: p.omega() * p.length / k.c,
        delta_q: charge_fluctuation(p, k),
        delta_phi: flux_fluctuation(p, k),
        phi_applied: applied_flux(k),
        p_ex_magnetic,
        p_ex_electric,
        clamped: cm || ce,
    })
}
