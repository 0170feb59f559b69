//! Dense state vectors over factored registers.
//!
//! A [`RegisterLayout`] is an ordered list of subregisters with their
//! dimensions. Amplitudes are flattened row-major: the last subregister
//! varies fastest, so for dims `[a, b]` the basis state `|i, j⟩` lives at
//! flat index `i * b + j`. Permutation tables and phase tables that span
//! several subregisters use the same convention for their joint index.
//!
//! Every gate here acts on a set of target subregisters and leaves the
//! remaining ones untouched; all of them preserve the Euclidean norm.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QemError, Result};

/// Default cap on the number of amplitudes a layout may describe.
pub const DEFAULT_DIM_CAP: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterLayout {
    dims: Vec<usize>,
    names: Vec<String>,
}

impl RegisterLayout {
    pub fn new<S: Into<String>>(regs: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        Self::with_cap(regs, DEFAULT_DIM_CAP)
    }

    pub fn with_cap<S: Into<String>>(regs: impl IntoIterator<Item = (S, usize)>, cap: usize) -> Result<Self> {
        let (names, dims): (Vec<String>, Vec<usize>) = regs.into_iter().map(|(n, d)| (n.into(), d)).unzip();
        if dims.is_empty() {
            return Err(QemError::InvalidLayout("layout has no subregisters".into()));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(QemError::InvalidLayout(format!(
                "subregister {i} ({}) has dimension 0",
                names[i]
            )));
        }
        let mut total: usize = 1;
        for &d in &dims {
            total = total
                .checked_mul(d)
                .filter(|&t| t <= cap)
                .ok_or(QemError::DimensionCap {
                    dim: dims.iter().fold(1usize, |a, &b| a.saturating_mul(b)),
                    cap,
                })?;
        }
        Ok(Self { dims, names })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self, subregister: usize) -> usize {
        self.dims[subregister]
    }

    /// Number of subregisters.
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, indices: &[usize]) -> Result<usize> {
        if indices.len() != self.dims.len() {
            return Err(QemError::LengthMismatch {
                expected: self.dims.len(),
                got: indices.len(),
            });
        }
        let mut flat = 0;
        for (sub, (&i, &d)) in indices.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return Err(QemError::IndexOutOfRange {
                    subregister: sub,
                    index: i,
                    dim: d,
                });
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = flat % d;
            flat /= d;
        }
        out
    }

    /// Joint dimension of `targets`, validating that they exist and are distinct.
    pub fn joint_dim(&self, targets: &[usize]) -> Result<usize> {
        let mut seen = vec![false; self.dims.len()];
        let mut joint = 1;
        for &t in targets {
            if t >= self.dims.len() {
                return Err(QemError::NoSuchSubregister(t));
            }
            if std::mem::replace(&mut seen[t], true) {
                return Err(QemError::DuplicateSubregister(t));
            }
            joint *= self.dims[t];
        }
        Ok(joint)
    }

    fn without(&self, targets: &[usize]) -> Option<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|i| !targets.contains(i)).collect();
        if keep.is_empty() {
            return None;
        }
        Some(Self {
            dims: keep.iter().map(|&i| self.dims[i]).collect(),
            names: keep.iter().map(|&i| self.names[i].clone()).collect(),
        })
    }
}

/// Offsets for iterating over the blocks a gate acts on.
///
/// `offsets[j]` is the flat-index contribution of joint target index `j`;
/// every element of `bases` is the contribution of one assignment of the
/// non-target subregisters.
struct BlockPlan {
    offsets: Vec<usize>,
    bases: Vec<usize>,
}

impl BlockPlan {
    fn new(layout: &RegisterLayout, targets: &[usize]) -> Result<Self> {
        layout.joint_dim(targets)?;
        let strides = layout.strides();
        let mut offsets = vec![0usize];
        for &t in targets {
            let mut next = Vec::with_capacity(offsets.len() * layout.dims[t]);
            for &o in &offsets {
                for i in 0..layout.dims[t] {
                    next.push(o + i * strides[t]);
                }
            }
            offsets = next;
        }
        let mut bases = vec![0usize];
        for r in (0..layout.len()).filter(|r| !targets.contains(r)) {
            let mut next = Vec::with_capacity(bases.len() * layout.dims[r]);
            for &b in &bases {
                for i in 0..layout.dims[r] {
                    next.push(b + i * strides[r]);
                }
            }
            bases = next;
        }
        Ok(Self { offsets, bases })
    }

    fn for_each_block(&self, amps: &mut [Complex64], mut f: impl FnMut(usize, &mut [Complex64])) {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.offsets.len()];
        for &base in &self.bases {
            for (slot, &o) in buf.iter_mut().zip(&self.offsets) {
                *slot = amps[base + o];
            }
            f(base, &mut buf);
            for (&v, &o) in buf.iter().zip(&self.offsets) {
                amps[base + o] = v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FourierDirection {
    /// Kernel `e^{+2πi jk/M} / √M`.
    Forward,
    /// Kernel `e^{-2πi jk/M} / √M`.
    Inverse,
}

/// Bijection on `0..n`; amplitude at `j` moves to `table[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(table: Vec<usize>) -> Result<Self> {
        let n = table.len();
        let mut hit = vec![false; n];
        for &t in &table {
            if t >= n || std::mem::replace(&mut hit[t], true) {
                return Err(QemError::NotBijective(n));
            }
        }
        Ok(Self(table))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn image(&self, j: usize) -> usize {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (j, &t) in self.0.iter().enumerate() {
            inv[t] = j;
        }
        Self(inv)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = QemError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub subregisters: Vec<usize>,
    /// Joint outcome index over `subregisters`, row-major in the listed order.
    pub outcome: usize,
    /// Pre-measurement marginal probability of `outcome`.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    layout: RegisterLayout,
    amps: Vec<Complex64>,
}

impl StateVector {
    pub fn new_basis_state(layout: RegisterLayout, indices: &[usize]) -> Result<Self> {
        let flat = layout.flat_index(indices)?;
        let mut amps = vec![Complex64::new(0.0, 0.0); layout.total_dim()];
        amps[flat] = Complex64::new(1.0, 0.0);
        Ok(Self { layout, amps })
    }

    pub fn uniform(layout: RegisterLayout) -> Self {
        let n = layout.total_dim();
        let a = Complex64::new(1.0 / (n as f64).sqrt(), 0.0);
        Self {
            layout,
            amps: vec![a; n],
        }
    }

    /// Builds a state from raw amplitudes, normalizing them.
    pub fn from_amplitudes(layout: RegisterLayout, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != layout.total_dim() {
            return Err(QemError::LengthMismatch {
                expected: layout.total_dim(),
                got: amps.len(),
            });
        }
        let mut s = Self { layout, amps };
        s.normalize()?;
        Ok(s)
    }

    /// Haar-like random state: i.i.d. complex gaussian components, normalized.
    pub fn random<R: Rng + ?Sized>(layout: RegisterLayout, rng: &mut R) -> Self {
        let amps = (0..layout.total_dim())
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let mut s = Self { layout, amps };
        s.normalize().expect("gaussian sample has nonzero norm");
        s
    }

    pub fn layout(&self) -> &RegisterLayout {
        &self.layout
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn amplitude(&self, indices: &[usize]) -> Result<Complex64> {
        Ok(self.amps[self.layout.flat_index(indices)?])
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(QemError::ZeroNorm("normalize"));
        }
        let inv = 1.0 / n;
        self.amps.iter_mut().for_each(|a| *a *= inv);
        Ok(())
    }

    /// Multiplies the amplitude of each joint basis index of `targets` by
    /// `factors[index]`. Does not renormalize.
    pub fn apply_diagonal(&mut self, targets: &[usize], factors: &[Complex64]) -> Result<()> {
        let joint = self.layout.joint_dim(targets)?;
        if factors.len() != joint {
            return Err(QemError::LengthMismatch {
                expected: joint,
                got: factors.len(),
            });
        }
        let plan = BlockPlan::new(&self.layout, targets)?;
        plan.for_each_block(&mut self.amps, |_, block| {
            for (a, f) in block.iter_mut().zip(factors) {
                *a *= f;
            }
        });
        Ok(())
    }

    /// `|j⟩ → e^{i phases[j]} |j⟩` on the joint index of `targets`.
    pub fn apply_diagonal_phase(&mut self, targets: &[usize], phases: &[f64]) -> Result<()> {
        let factors: Vec<Complex64> = phases.iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
        self.apply_diagonal(targets, &factors)
    }

    /// Unitary DFT on one subregister.
    pub fn apply_fourier(&mut self, target: usize, direction: FourierDirection) -> Result<()> {
        self.layout.joint_dim(&[target])?;
        let m = self.layout.dims[target];
        let sign = match direction {
            FourierDirection::Forward => 1.0,
            FourierDirection::Inverse => -1.0,
        };
        let scale = 1.0 / (m as f64).sqrt();
        let twiddle: Vec<Complex64> = (0..m)
            .map(|j| Complex64::from_polar(scale, sign * 2.0 * PI * j as f64 / m as f64))
            .collect();
        let plan = BlockPlan::new(&self.layout, &[target])?;
        let mut out = vec![Complex64::new(0.0, 0.0); m];
        plan.for_each_block(&mut self.amps, |_, block| {
            for (k, o) in out.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, a) in block.iter().enumerate() {
                    acc += a * twiddle[(j * k) % m];
                }
                *o = acc;
            }
            block.copy_from_slice(&out);
        });
        Ok(())
    }

    /// Moves the amplitude at joint index `j` of `targets` to `perm(j)`.
    pub fn apply_permutation(&mut self, targets: &[usize], perm: &Permutation) -> Result<()> {
        let joint = self.layout.joint_dim(targets)?;
        if perm.len() != joint {
            return Err(QemError::LengthMismatch {
                expected: joint,
                got: perm.len(),
            });
        }
        let plan = BlockPlan::new(&self.layout, targets)?;
        let mut out = vec![Complex64::new(0.0, 0.0); joint];
        plan.for_each_block(&mut self.amps, |_, block| {
            for (j, a) in block.iter().enumerate() {
                out[perm.image(j)] = *a;
            }
            block.copy_from_slice(&out);
        });
        Ok(())
    }

    /// Applies `perms[c]` to `targets` in the branch where `control` holds `c`.
    pub fn apply_controlled_permutation(
        &mut self,
        control: usize,
        targets: &[usize],
        perms: &[Permutation],
    ) -> Result<()> {
        if targets.contains(&control) {
            return Err(QemError::DuplicateSubregister(control));
        }
        self.layout.joint_dim(&[control])?;
        let joint = self.layout.joint_dim(targets)?;
        let cdim = self.layout.dims[control];
        if perms.len() != cdim {
            return Err(QemError::LengthMismatch {
                expected: cdim,
                got: perms.len(),
            });
        }
        if let Some(p) = perms.iter().find(|p| p.len() != joint) {
            return Err(QemError::LengthMismatch {
                expected: joint,
                got: p.len(),
            });
        }
        let cstride = self.layout.strides()[control];
        let plan = BlockPlan::new(&self.layout, targets)?;
        let mut out = vec![Complex64::new(0.0, 0.0); joint];
        plan.for_each_block(&mut self.amps, |base, block| {
            let perm = &perms[(base / cstride) % cdim];
            for (j, a) in block.iter().enumerate() {
                out[perm.image(j)] = *a;
            }
            block.copy_from_slice(&out);
        });
        Ok(())
    }

    /// Inversion about the mean on the joint index of `targets`, independently
    /// for every assignment of the other subregisters.
    pub fn apply_grover_diffusion(&mut self, targets: &[usize]) -> Result<()> {
        let plan = BlockPlan::new(&self.layout, targets)?;
        plan.for_each_block(&mut self.amps, |_, block| {
            let mean = block.iter().sum::<Complex64>() / block.len() as f64;
            for a in block.iter_mut() {
                *a = 2.0 * mean - *a;
            }
        });
        Ok(())
    }

    /// Marginal distribution over the joint index of `targets`.
    pub fn marginal(&self, targets: &[usize]) -> Result<Vec<f64>> {
        let plan = BlockPlan::new(&self.layout, targets)?;
        let mut probs = vec![0.0; plan.offsets.len()];
        for &base in &plan.bases {
            for (p, &o) in probs.iter_mut().zip(&plan.offsets) {
                *p += self.amps[base + o].norm_sqr();
            }
        }
        Ok(probs)
    }

    /// Samples an outcome of `targets` from the exact marginal, projects and
    /// renormalizes.
    pub fn measure<R: Rng + ?Sized>(&mut self, targets: &[usize], rng: &mut R) -> Result<MeasurementRecord> {
        let probs = self.marginal(targets)?;
        let outcome =
            sample_index(&probs, rng.random::<f64>()).ok_or(QemError::ZeroNorm("measurement on zero state"))?;
        self.project(targets, outcome, &probs)
    }

    /// Projects onto a chosen outcome. Fails if it has zero probability.
    pub fn measure_forced(&mut self, targets: &[usize], outcome: usize) -> Result<MeasurementRecord> {
        let probs = self.marginal(targets)?;
        if outcome >= probs.len() {
            return Err(QemError::IndexOutOfRange {
                subregister: targets.first().copied().unwrap_or(0),
                index: outcome,
                dim: probs.len(),
            });
        }
        self.project(targets, outcome, &probs)
    }

    fn project(&mut self, targets: &[usize], outcome: usize, probs: &[f64]) -> Result<MeasurementRecord> {
        let p = probs[outcome];
        if p <= 0.0 {
            return Err(QemError::ZeroNorm("projection onto impossible outcome"));
        }
        let plan = BlockPlan::new(&self.layout, targets)?;
        let scale = 1.0 / p.sqrt();
        plan.for_each_block(&mut self.amps, |_, block| {
            for (j, a) in block.iter_mut().enumerate() {
                *a = if j == outcome {
                    *a * scale
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
        });
        Ok(MeasurementRecord {
            subregisters: targets.to_vec(),
            outcome,
            probability: p,
        })
    }

    /// Restricts the state to `targets = outcome` and drops those
    /// subregisters. Meant for registers that have just been measured, where
    /// the state is a product and nothing is lost.
    pub fn discard(&self, targets: &[usize], outcome: usize) -> Result<Self> {
        let plan = BlockPlan::new(&self.layout, targets)?;
        if outcome >= plan.offsets.len() {
            return Err(QemError::IndexOutOfRange {
                subregister: targets.first().copied().unwrap_or(0),
                index: outcome,
                dim: plan.offsets.len(),
            });
        }
        let layout = self
            .layout
            .without(targets)
            .ok_or_else(|| QemError::InvalidLayout("cannot discard every subregister".into()))?;
        // bases enumerate the remaining subregisters in row-major order
        let amps = plan
            .bases
            .iter()
            .map(|&b| self.amps[b + plan.offsets[outcome]])
            .collect();
        Self::from_amplitudes(layout, amps)
    }

    /// Appends fresh subregisters initialized to `|0⟩`.
    pub fn extend<S: Into<String>>(&self, regs: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let extra: Vec<(String, usize)> = regs.into_iter().map(|(n, d)| (n.into(), d)).collect();
        let block: usize = extra.iter().map(|e| e.1).product();
        let layout = RegisterLayout::new(
            self.layout
                .names
                .iter()
                .cloned()
                .zip(self.layout.dims.iter().copied())
                .chain(extra),
        )?;
        let mut amps = vec![Complex64::new(0.0, 0.0); layout.total_dim()];
        for (i, a) in self.amps.iter().enumerate() {
            amps[i * block] = *a;
        }
        Ok(Self { layout, amps })
    }

    /// Reinterprets the amplitudes under a different layout of equal size.
    pub fn reshape(self, layout: RegisterLayout) -> Result<Self> {
        if layout.total_dim() != self.amps.len() {
            return Err(QemError::LengthMismatch {
                expected: self.amps.len(),
                got: layout.total_dim(),
            });
        }
        Ok(Self {
            layout,
            amps: self.amps,
        })
    }

    pub(crate) fn amps_mut(&mut self) -> &mut [Complex64] {
        &mut self.amps
    }

    /// Largest element-wise deviation between `self` and `other` after the
    /// best global phase alignment.
    pub fn phase_aligned_distance(&self, other: &Self) -> f64 {
        if self.layout.dims != other.layout.dims {
            return f64::INFINITY;
        }
        let overlap: Complex64 = other.amps.iter().zip(&self.amps).map(|(b, a)| b.conj() * a).sum();
        let phase = if overlap.norm() > 0.0 {
            overlap / overlap.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - phase * b).norm())
            .fold(0.0, f64::max)
    }

    pub fn approx_eq_up_to_phase(&self, other: &Self, tol: f64) -> bool {
        self.phase_aligned_distance(other) <= tol
    }
}

/// Index `i` with cumulative probability first exceeding `u * total`,
/// never returning a zero-probability entry.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> Option<usize> {
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last_nonzero = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = Some(i);
            acc += p;
            if acc > target {
                return Some(i);
            }
        }
    }
    last_nonzero
}
