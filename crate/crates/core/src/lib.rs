//! Simulation of quantum electron microscopy protocols: a dense state-vector
//! engine, ideal and physical phase oracles, search and imaging algorithms,
//! the diffraction-limited amplitude error, and circuit feasibility estimates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod diffraction;
pub mod error;
pub mod experiment;
pub mod feasibility;
pub mod oracle;
pub mod statevec;

pub use algorithms::{BijectionStrategy, CandidateSet, SearchResult};
pub use diffraction::{AmplitudeErrorResult, BeamProfile, Composition, CrossSectionTable};
pub use error::{QemError, Result};
pub use experiment::{ExperimentConfig, FeasibilityConfig, Scenario, Summary};
pub use feasibility::{CircuitParams, PhysicalConstants, CODATA_2018};
pub use oracle::{CollapseShape, DoseLedger, NoiseConfig, OracleMode, PhaseMap};
pub use statevec::{RegisterLayout, StateVector};
