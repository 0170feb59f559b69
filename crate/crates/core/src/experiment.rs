//! Config-driven runs with seeded, order-independent trials.
//!
//! A run writes into `<output_dir>/<scenario>-<seed>/`:
//! `summary.json` (scalar metrics), `aggregate.csv` (the same metrics as
//! `metric,value` rows), `trials.jsonl` (one record per trial, where the
//! scenario has trials), scenario tables such as `dose.csv`, and
//! `manifest.json`. Everything except the manifest's wall time is a pure
//! function of the config.
//!
//! Trial `i` draws from `ChaCha20Rng::seed_from_u64(seed ^ i)`, so results do
//! not depend on how trials are scheduled across threads.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    analytic_grover_success, classical_pixel_scan, classical_structure_search, default_pixel_iterations,
    default_structure_iterations, grover_pixel_search, grover_structure_search, multipass_imaging, BijectionStrategy,
    CandidateSet, SearchResult,
};
use crate::diffraction::{
    amplitude_error, csv_io, elastic_rate, scatter_profile, scattering_probability, BeamProfile, Composition,
    CrossSectionTable, PHI_STEPS,
};
use crate::error::{QemError, Result};
use crate::feasibility::{self, BackActionReport, CircuitParams, Deflection, PhysicalConstants, CODATA_2018};
use crate::oracle::{oracle_call_ideal, oracle_call_physical, DoseLedger, NoiseConfig, OracleMode, PhaseMap};
use crate::statevec::{RegisterLayout, StateVector};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    OracleVerify,
    GroverPixel,
    StructureSearch,
    Multipass,
    AmplitudeError,
    Feasibility,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::OracleVerify => "oracle-verify",
            Self::GroverPixel => "grover-pixel",
            Self::StructureSearch => "structure-search",
            Self::Multipass => "multipass",
            Self::AmplitudeError => "amplitude-error",
            Self::Feasibility => "feasibility",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Ideal,
    #[default]
    Physical,
}

/// Inputs of the feasibility calculator. Without `inductance_h` and
/// `capacitance_f` the circuit is the free-space one, `L = μ₀l`, `C = ε₀l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeasibilityConfig {
    pub inductance_h: Option<f64>,
    pub capacitance_f: Option<f64>,
    pub length_m: f64,
    /// Deflector flux in units of `h/2e`.
    pub flux_phi0: Option<f64>,
    /// Electron momentum in kg·m/s; derived from `beam_kev` when absent.
    pub momentum: Option<f64>,
    #[serde(default = "default_beam_kev")]
    pub beam_kev: f64,
    pub width_m: Option<f64>,
}

fn default_beam_kev() -> f64 {
    300.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityOutput {
    pub constants: PhysicalConstants,
    pub z0_over_rk: f64,
    pub two_alpha: f64,
    pub back_action: BackActionReport,
    pub deflection: Option<Deflection>,
}

pub fn evaluate_feasibility(cfg: &FeasibilityConfig) -> Result<FeasibilityOutput> {
    let k = CODATA_2018;
    let params = match (cfg.inductance_h, cfg.capacitance_f) {
        (Some(l), Some(c)) => CircuitParams::new(l, c, cfg.length_m)?,
        (None, None) => CircuitParams::free_space(cfg.length_m, &k)?,
        _ => {
            return Err(QemError::Config(
                "give both inductance_h and capacitance_f, or neither".into(),
            ))
        }
    };
    let deflection = match (cfg.flux_phi0, cfg.width_m) {
        (Some(phi), Some(w)) => {
            let p = cfg
                .momentum
                .unwrap_or_else(|| feasibility::electron_momentum(cfg.beam_kev, &k));
            Some(feasibility::deflection(phi * k.phi0(), p, w, &k)?)
        }
        (None, None) => None,
        _ => return Err(QemError::Config("deflection needs both flux_phi0 and width_m".into())),
    };
    Ok(FeasibilityOutput {
        constants: k,
        z0_over_rk: k.z0() / k.r_k(),
        two_alpha: 2.0 * k.alpha,
        back_action: feasibility::back_action(&params, &k)?,
        deflection,
    })
}

/// One experiment, as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub d: Option<usize>,
    /// Number of candidates for structure search.
    #[serde(alias = "N")]
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub iterations: Option<usize>,
    pub trials: Option<usize>,
    #[serde(default)]
    pub oracle: OracleKind,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Marked pixel `[p, q]` for grover-pixel.
    pub marked: Option<[usize; 2]>,
    /// Oracle passes for multipass.
    pub passes: Option<usize>,
    /// Specimen phase map CSV (multipass, oracle-verify, and the true map
    /// of a structure search over loaded candidates).
    pub phase_map: Option<PathBuf>,
    /// Directory of candidate phase-map CSVs.
    pub candidates: Option<PathBuf>,
    pub bijection: Option<BijectionStrategy>,
    /// `"bundled"` for the built-in screened-Rutherford model, otherwise a CSV path.
    pub cross_sections: Option<String>,
    pub composition: Option<Composition>,
    /// Scattering probability; defaults to `rate × thickness` from the composition.
    pub p_s: Option<f64>,
    /// Beam characteristic angle in radians.
    pub sigma: Option<f64>,
    pub phi_steps: Option<usize>,
    pub circuit: Option<FeasibilityConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| QemError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.phase_map.as_mut().map(resolve);
        cfg.candidates.as_mut().map(resolve);
        resolve(&mut cfg.output_dir);
        if let Some(cs) = cfg.cross_sections.as_mut() {
            if cs != "bundled" && Path::new(cs.as_str()).is_relative() {
                *cs = base.join(cs.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("{}-{}", self.scenario.name(), self.seed))
    }

    fn require<T: Copy>(&self, v: Option<T>, name: &str) -> Result<T> {
        v.ok_or_else(|| QemError::Config(format!("scenario {} requires `{name}`", self.scenario.name())))
    }

    fn oracle_mode(&self) -> Result<OracleMode> {
        self.noise.validate()?;
        match self.oracle {
            OracleKind::Physical => Ok(OracleMode::Physical(self.noise)),
            OracleKind::Ideal if self.noise.is_noise_free() => Ok(OracleMode::Ideal),
            OracleKind::Ideal => Err(QemError::Config("noise requires the physical oracle".into())),
        }
    }
}

/// Scalar results of a run plus the structural parameters `compare` checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: Scenario,
    pub seed: u64,
    pub trials: Option<usize>,
    /// Parameters that must agree for two runs to be comparable.
    pub structure: BTreeMap<String, u64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub rng: String,
    pub wall_time_s: f64,
    /// Output files, relative to the run directory.
    pub files: Vec<String>,
    pub trial_records: Option<TrialRecords>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecords {
    pub file: String,
    pub count: usize,
}

pub fn trial_rng(seed: u64, trial: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ trial as u64)
}

/// Runs `f` for every trial index, in parallel, returning results in index order.
pub fn run_trials<T, F>(seed: u64, trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha20Rng) -> Result<T> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|i| f(i, &mut trial_rng(seed, i)))
        .collect()
}

struct Output {
    summary: Summary,
    trials: Option<Vec<serde_json::Value>>,
    tables: Vec<(String, Vec<String>, Vec<Vec<f64>>)>,
    extra_json: Vec<(String, serde_json::Value)>,
}

impl Output {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            summary: Summary {
                scenario: cfg.scenario,
                seed: cfg.seed,
                trials: None,
                structure: BTreeMap::new(),
                metrics: BTreeMap::new(),
            },
            trials: None,
            tables: Vec::new(),
            extra_json: Vec::new(),
        }
    }

    fn metric(&mut self, name: &str, v: f64) {
        self.summary.metrics.insert(name.into(), v);
    }

    fn structure(&mut self, name: &str, v: usize) {
        self.summary.structure.insert(name.into(), v as u64);
    }
}

/// Executes the scenario and writes its files. Returns the manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let out = match cfg.scenario {
        Scenario::OracleVerify => oracle_verify(cfg)?,
        Scenario::GroverPixel => grover_pixel(cfg)?,
        Scenario::StructureSearch => structure_search(cfg)?,
        Scenario::Multipass => multipass(cfg)?,
        Scenario::AmplitudeError => amplitude(cfg)?,
        Scenario::Feasibility => feasibility_scenario(cfg)?,
    };
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();

    write_json(&dir.join("summary.json"), &out.summary)?;
    files.push("summary.json".to_string());

    let mut w = csv::Writer::from_path(dir.join("aggregate.csv")).map_err(csv_io)?;
    w.write_record(["metric", "value"]).map_err(csv_io)?;
    for (k, v) in &out.summary.metrics {
        w.write_record([k.clone(), format!("{v:?}")]).map_err(csv_io)?;
    }
    w.flush()?;
    files.push("aggregate.csv".to_string());

    for (name, header, rows) in &out.tables {
        let mut w = csv::Writer::from_path(dir.join(name)).map_err(csv_io)?;
        w.write_record(header).map_err(csv_io)?;
        for row in rows {
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(csv_io)?;
        }
        w.flush()?;
        files.push(name.clone());
    }
    for (name, value) in &out.extra_json {
        write_json(&dir.join(name), value)?;
        files.push(name.clone());
    }
    let trial_records = match &out.trials {
        Some(records) => {
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join("trials.jsonl"))?);
            for r in records {
                serde_json::to_writer(&mut f, r)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            files.push("trials.jsonl".to_string());
            Some(TrialRecords {
                file: "trials.jsonl".into(),
                count: records.len(),
            })
        }
        None => None,
    };
    let manifest = RunManifest {
        tool: "qem".into(),
        version: TOOL_VERSION.into(),
        config: cfg.clone(),
        rng: "ChaCha20 (rand_chacha), stream seed = seed XOR trial index".into(),
        wall_time_s: start.elapsed().as_secs_f64(),
        files,
        trial_records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn random_map<R: Rng + ?Sized>(d: usize, rng: &mut R) -> PhaseMap {
    PhaseMap::new(d, (0..d * d).map(|_| rng.random_range(-PI..PI)).collect()).expect("finite phases")
}

fn load_map(path: &Path, d: Option<usize>) -> Result<PhaseMap> {
    let (_, map) = PhaseMap::load(path)?;
    if let Some(d) = d {
        if map.d() != d {
            return Err(QemError::Config(format!(
                "{} is {1}x{1}, config says d={d}",
                path.display(),
                map.d()
            )));
        }
    }
    Ok(map)
}

fn oracle_verify(cfg: &ExperimentConfig) -> Result<Output> {
    let trials = cfg.trials.unwrap_or(100);
    let mode_noise = cfg.noise;
    mode_noise.validate()?;
    let map = match &cfg.phase_map {
        Some(p) => load_map(p, cfg.d)?,
        None => random_map(cfg.require(cfg.d, "d")?, &mut ChaCha20Rng::seed_from_u64(cfg.seed)),
    };
    let d = map.d();
    let layout = RegisterLayout::new([("x", d), ("y", d)])?;
    let errors = run_trials(cfg.seed, trials, |_, rng| {
        let s0 = StateVector::random(layout.clone(), rng);
        let mut ideal = s0.clone();
        oracle_call_ideal(&mut ideal, [0, 1], &map, &mut DoseLedger::new(d))?;
        let mut phys = s0;
        let call = oracle_call_physical(&mut phys, [0, 1], &map, &mode_noise, rng, &mut DoseLedger::new(d))?;
        Ok((phys.phase_aligned_distance(&ideal), call.detected))
    })?;
    let mut out = Output::new(cfg);
    out.summary.trials = Some(trials);
    out.structure("d", d);
    let max = errors.iter().fold(0.0f64, |m, (e, _)| m.max(*e));
    out.metric("max_error", max);
    out.metric(
        "mean_error",
        errors.iter().map(|(e, _)| e).sum::<f64>() / trials.max(1) as f64,
    );
    out.trials = Some(
        errors
            .iter()
            .enumerate()
            .map(|(i, (e, (k, l)))| serde_json::json!({"trial": i, "error": e, "detected": [k, l]}))
            .collect(),
    );
    Ok(out)
}

fn search_record(i: usize, r: &SearchResult) -> serde_json::Value {
    serde_json::json!({
        "trial": i,
        "reported": r.reported,
        "success": r.success,
        "success_probability": r.success_probability,
        "electrons_used": r.electrons_used,
        "beta_outcomes": r.beta_outcomes,
        "lost_candidates": r.lost_candidates,
    })
}

fn mean_ledger(d: usize, results: &[SearchResult]) -> Result<Vec<f64>> {
    let mut total = DoseLedger::new(d);
    for r in results {
        total.absorb(&r.ledger)?;
    }
    let n = results.len().max(1) as f64;
    Ok(total.per_pixel().iter().map(|v| v / n).collect())
}

fn dose_table(d: usize, mean: &[f64]) -> (String, Vec<String>, Vec<Vec<f64>>) {
    let rows = (0..d * d)
        .map(|i| vec![(i / d) as f64, (i % d) as f64, mean[i]])
        .collect();
    (
        "dose.csv".into(),
        vec!["p".into(), "q".into(), "mean_dose".into()],
        rows,
    )
}

fn grover_pixel(cfg: &ExperimentConfig) -> Result<Output> {
    let d = cfg.require(cfg.d, "d")?;
    let k = cfg.k.unwrap_or(1);
    let iterations = cfg.iterations.unwrap_or_else(|| default_pixel_iterations(d));
    let trials = cfg.trials.unwrap_or(1000);
    let mode = cfg.oracle_mode()?;
    let [p, q] = cfg.marked.unwrap_or_else(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        [rng.random_range(0..d), rng.random_range(0..d)]
    });
    let map = PhaseMap::single_pixel(d, (p, q), PI / k as f64)?;
    let results = run_trials(cfg.seed, trials, |_, rng| {
        grover_pixel_search(&map, k, iterations, &mode, rng)
    })?;
    let classical = classical_pixel_scan(&map, &mut ChaCha20Rng::seed_from_u64(cfg.seed))?;

    let mut out = Output::new(cfg);
    out.summary.trials = Some(trials);
    out.structure("d", d);
    out.structure("k", k);
    out.structure("iterations", iterations);
    let n = trials.max(1) as f64;
    out.metric("success_rate", results.iter().filter(|r| r.success).count() as f64 / n);
    out.metric(
        "mean_success_probability",
        results.iter().map(|r| r.success_probability).sum::<f64>() / n,
    );
    out.metric(
        "analytic_success_probability",
        analytic_grover_success(d * d, iterations),
    );
    out.metric("electrons_per_trial", (k * iterations) as f64);
    let mean = mean_ledger(d, &results)?;
    out.metric("mean_marked_dose", mean[p * d + q]);
    out.metric("classical_marked_dose", classical.ledger.at(p, q));
    out.metric("classical_electrons", classical.electrons_used as f64);
    out.tables.push(dose_table(d, &mean));
    out.trials = Some(results.iter().enumerate().map(|(i, r)| search_record(i, r)).collect());
    Ok(out)
}

fn structure_search(cfg: &ExperimentConfig) -> Result<Output> {
    let k = cfg.require(cfg.k, "k")?;
    let trials = cfg.trials.unwrap_or(100);
    let mode = cfg.oracle_mode()?;
    let strategy = cfg.bijection.unwrap_or_default();
    let (set, truth) = match &cfg.candidates {
        Some(dir) => {
            let set = CandidateSet::load_dir(dir, k, strategy)?;
            let truth_path = cfg
                .phase_map
                .as_ref()
                .ok_or_else(|| QemError::Config("loaded candidates need `phase_map` for the true specimen".into()))?;
            let truth = load_map(truth_path, Some(set.d()))?;
            (set, truth)
        }
        None => {
            let d = cfg.require(cfg.d, "d")?;
            let n = cfg.require(cfg.n, "n")?;
            let (set, truth, _) =
                CandidateSet::synthetic(d, n, k, strategy, &mut ChaCha20Rng::seed_from_u64(cfg.seed))?;
            (set, truth)
        }
    };
    let iterations = cfg
        .iterations
        .unwrap_or_else(|| default_structure_iterations(set.len()));
    let results = run_trials(cfg.seed, trials, |_, rng| {
        grover_structure_search(&set, &truth, Some(iterations), &mode, rng)
    })?;
    let classical = classical_structure_search(&set, &truth, &mode, &mut ChaCha20Rng::seed_from_u64(cfg.seed))?;

    let mut out = Output::new(cfg);
    out.summary.trials = Some(trials);
    out.structure("d", set.d());
    out.structure("n", set.len());
    out.structure("k", k);
    out.structure("iterations", iterations);
    let n = trials.max(1) as f64;
    out.metric("success_rate", results.iter().filter(|r| r.success).count() as f64 / n);
    out.metric(
        "mean_success_probability",
        results.iter().map(|r| r.success_probability).sum::<f64>() / n,
    );
    out.metric(
        "electrons_per_trial",
        results.first().map_or(0.0, |r| r.electrons_used as f64),
    );
    out.metric("classical_electrons", classical.electrons_used as f64);
    out.metric("classical_success", f64::from(u8::from(classical.success)));
    out.metric(
        "trials_with_lost_candidates",
        results.iter().filter(|r| !r.lost_candidates.is_empty()).count() as f64,
    );
    out.tables.push(dose_table(set.d(), &mean_ledger(set.d(), &results)?));
    out.trials = Some(results.iter().enumerate().map(|(i, r)| search_record(i, r)).collect());
    Ok(out)
}

fn multipass(cfg: &ExperimentConfig) -> Result<Output> {
    let path = cfg
        .phase_map
        .as_ref()
        .ok_or_else(|| QemError::Config("scenario multipass requires `phase_map`".into()))?;
    let map = load_map(path, cfg.d)?;
    let d = map.d();
    let m = cfg.require(cfg.passes, "passes")?;
    let trials = cfg.trials.unwrap_or(1);
    let mode = cfg.oracle_mode()?;
    let results = run_trials(cfg.seed, trials, |_, rng| multipass_imaging(&map, m, &mode, rng))?;
    let n = trials.max(1) as f64;
    let mut signal = vec![0.0; d * d];
    for r in &results {
        for (acc, s) in signal.iter_mut().zip(&r.signal) {
            *acc += s / n;
        }
    }
    let mut out = Output::new(cfg);
    out.summary.trials = Some(trials);
    out.structure("d", d);
    out.structure("passes", m);
    let centred = map.zero_mean();
    let expected: Vec<f64> = centred.as_slice().iter().map(|t| m as f64 * t).collect();
    let dev = signal
        .iter()
        .zip(&expected)
        .fold(0.0f64, |a, (s, e)| a.max((s - e).abs()));
    out.metric("max_abs_signal", signal.iter().fold(0.0f64, |a, s| a.max(s.abs())));
    out.metric("max_linearization_residual", dev);
    let rows = (0..d * d)
        .map(|i| {
            vec![
                (i / d) as f64,
                (i % d) as f64,
                map.as_slice()[i],
                signal[i],
                expected[i],
            ]
        })
        .collect();
    out.tables.push((
        "signal.csv".into(),
        ["p", "q", "theta", "signal", "linear_prediction"]
            .map(String::from)
            .to_vec(),
        rows,
    ));
    Ok(out)
}

fn load_table(source: &str) -> Result<CrossSectionTable> {
    if source == "bundled" {
        Ok(CrossSectionTable::screened_rutherford())
    } else {
        CrossSectionTable::load(Path::new(source))
    }
}

fn amplitude(cfg: &ExperimentConfig) -> Result<Output> {
    let source = cfg.cross_sections.as_deref().ok_or_else(|| QemError::DataRequired {
        what: "`cross_sections` (\"bundled\" or a path to an elastic cross-section table)".into(),
        format: "CSV with header `theta_rad,H,C,N,O,S` (dσ/dΩ in nm²/sr)".into(),
    })?;
    let table = load_table(source)?;
    let composition = cfg.composition.unwrap_or_default();
    let rate = elastic_rate(&table, &composition)?;
    let p_s = cfg
        .p_s
        .unwrap_or_else(|| scattering_probability(rate, composition.thickness_nm));
    let beam = BeamProfile::new(cfg.require(cfg.sigma, "sigma")?)?;
    let phi_steps = cfg.phi_steps.unwrap_or(PHI_STEPS);
    let s = scatter_profile(&table, &composition, p_s)?;
    let r = amplitude_error(table.theta(), &s, &beam, p_s, phi_steps)?;

    let mut out = Output::new(cfg);
    out.structure("phi_steps", phi_steps);
    out.structure("grid_points", table.theta().len());
    out.metric("p_s", p_s);
    out.metric("sigma", beam.sigma());
    out.metric("elastic_rate_per_nm", rate);
    out.metric("e_a", r.e_a);
    out.metric("normalization_residual", r.residuals.relative);
    let rows = (0..r.theta.len())
        .map(|i| vec![r.theta[i], r.e_curve[i], r.var_b[i], r.transmitted[i], r.scattered[i]])
        .collect();
    out.tables.push((
        "e_curve.csv".into(),
        ["theta_rad", "E", "VarB", "T", "S"].map(String::from).to_vec(),
        rows,
    ));
    let mut summary = r.summary_json();
    summary["cross_sections"] = serde_json::Value::String(table.source().to_string());
    out.extra_json.push(("amplitude_error.json".into(), summary));
    Ok(out)
}

fn feasibility_scenario(cfg: &ExperimentConfig) -> Result<Output> {
    let fc = cfg
        .circuit
        .ok_or_else(|| QemError::Config("scenario feasibility requires `circuit`".into()))?;
    let report = evaluate_feasibility(&fc)?;
    let mut out = Output::new(cfg);
    out.metric("z0_over_rk", report.z0_over_rk);
    out.metric("delta_q_formal", report.back_action.delta_q.formal);
    out.metric("delta_phi_reduced", report.back_action.delta_phi.reduced);
    out.metric("p_ex_magnetic_formal", report.back_action.p_ex_magnetic.formal);
    out.metric("p_ex_magnetic_reduced", report.back_action.p_ex_magnetic.reduced);
    out.metric("p_ex_electric_formal", report.back_action.p_ex_electric.formal);
    if let Some(d) = report.deflection {
        out.metric("deflection_ratio", d.ratio);
    }
    out.extra_json
        .push(("back_action.json".into(), serde_json::to_value(&report)?));
    Ok(out)
}

/// Per-metric difference between two runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDrift {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub abs_diff: f64,
    /// `|Δ| / |baseline|`; zero when both are zero.
    pub rel_diff: f64,
    /// For `*_rate` metrics: `3·√(p̂(1−p̂)(1/n₁ + 1/n₂))` with pooled `p̂`.
    pub binomial_3sigma: Option<f64>,
    pub within_bound: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub scenario: Scenario,
    pub metrics: Vec<MetricDrift>,
    pub max_abs_diff: f64,
    pub identical: bool,
}

/// Reads a run's summary from its directory, its `manifest.json`, or its `summary.json`.
pub fn load_summary(path: &Path) -> Result<Summary> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    let text = fs::read_to_string(dir.join("summary.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn compare(baseline: &Summary, candidate: &Summary) -> Result<DriftReport> {
    if baseline.scenario != candidate.scenario {
        return Err(QemError::ScenarioMismatch(format!(
            "baseline is {}, candidate is {}",
            baseline.scenario.name(),
            candidate.scenario.name()
        )));
    }
    if baseline.structure != candidate.structure {
        return Err(QemError::ScenarioMismatch(format!(
            "structural parameters differ: {:?} vs {:?}",
            baseline.structure, candidate.structure
        )));
    }
    let mut metrics = Vec::new();
    for (name, &b) in &baseline.metrics {
        let Some(&c) = candidate.metrics.get(name) else {
            return Err(QemError::ScenarioMismatch(format!(
                "metric {name} missing from candidate"
            )));
        };
        let abs_diff = (c - b).abs();
        let rel_diff = if abs_diff == 0.0 { 0.0 } else { abs_diff / b.abs() };
        let bound = match (name.ends_with("_rate"), baseline.trials, candidate.trials) {
            (true, Some(n1), Some(n2)) if n1 > 0 && n2 > 0 => {
                let pooled = (b * n1 as f64 + c * n2 as f64) / (n1 + n2) as f64;
                Some(3.0 * (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt())
            }
            _ => None,
        };
        metrics.push(MetricDrift {
            metric: name.clone(),
            baseline: b,
            candidate: c,
            abs_diff,
            rel_diff,
            binomial_3sigma: bound,
            within_bound: bound.map(|s| abs_diff <= s),
        });
    }
    if let Some(extra) = candidate.metrics.keys().find(|k| !baseline.metrics.contains_key(*k)) {
        return Err(QemError::ScenarioMismatch(format!(
            "metric {extra} missing from baseline"
        )));
    }
    let max_abs_diff = metrics.iter().fold(0.0f64, |m, d| m.max(d.abs_diff));
    Ok(DriftReport {
        scenario: baseline.scenario,
        identical: metrics.iter().all(|m| m.baseline.to_bits() == m.candidate.to_bits()),
        metrics,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(json: serde_json::Value, dir: &Path) -> ExperimentConfig {
        let mut cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn seed_is_mandatory_and_fields_are_checked() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"scenario":"grover-pixel","d":4}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"scenario":"grover-pixel","seed":1,"dd":4}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"scenario":"nope","seed":1}"#).is_err());
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(serde_json::json!({"scenario": "grover-pixel", "seed": 1}), dir.path());
        assert!(matches!(run(&cfg), Err(QemError::Config(_))));
    }

    #[test]
    fn trials_do_not_depend_on_scheduling() {
        let a = run_trials(9, 64, |i, rng| Ok((i, rng.random::<u64>()))).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool
            .install(|| run_trials(9, 64, |i, rng| Ok((i, rng.random::<u64>()))))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a[5].1, trial_rng(9, 5).random::<u64>());
    }

    #[test]
    fn grover_pixel_run_and_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            serde_json::json!({"scenario": "grover-pixel", "seed": 5, "d": 4, "k": 1, "iterations": 3, "trials": 2000}),
            dir.path(),
        );
        let m = run(&cfg).unwrap();
        let run_dir = cfg.run_dir();
        assert!(run_dir.ends_with("grover-pixel-5"));
        for f in &m.files {
            assert!(run_dir.join(f).exists(), "{f}");
        }
        let first: Vec<Vec<u8>> = m.files.iter().map(|f| fs::read(run_dir.join(f)).unwrap()).collect();
        let s1 = load_summary(&run_dir).unwrap();
        assert!((s1.metrics["success_rate"] - 0.961).abs() < 0.02);
        assert_eq!(s1.metrics["classical_marked_dose"], 1.0);

        run(&cfg).unwrap();
        for (f, bytes) in m.files.iter().zip(&first) {
            assert_eq!(&fs::read(run_dir.join(f)).unwrap(), bytes, "{f} changed");
        }
        let s2 = load_summary(&run_dir.join("manifest.json")).unwrap();
        let report = compare(&s1, &s2).unwrap();
        assert!(report.identical && report.max_abs_diff == 0.0);
    }

    #[test]
    fn compare_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let a = config(
            serde_json::json!({"scenario": "oracle-verify", "seed": 1, "d": 2, "trials": 5}),
            dir.path(),
        );
        let b = config(
            serde_json::json!({"scenario": "oracle-verify", "seed": 2, "d": 4, "trials": 5}),
            dir.path(),
        );
        run(&a).unwrap();
        run(&b).unwrap();
        let sa = load_summary(&a.run_dir()).unwrap();
        let sb = load_summary(&b.run_dir()).unwrap();
        assert!(sa.metrics["max_error"] <= 1e-10);
        assert!(matches!(compare(&sa, &sb), Err(QemError::ScenarioMismatch(_))));
        let mut sc = sa.clone();
        sc.scenario = Scenario::Multipass;
        assert!(matches!(compare(&sa, &sc), Err(QemError::ScenarioMismatch(_))));
    }

    #[test]
    fn amplitude_error_scenarios() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            serde_json::json!({"scenario": "amplitude-error", "seed": 0, "cross_sections": "bundled", "p_s": 0.0, "sigma": 0.05}),
            dir.path(),
        );
        run(&cfg).unwrap();
        let s = load_summary(&cfg.run_dir()).unwrap();
        assert_eq!(s.metrics["e_a"], 0.0);
        assert!(cfg.run_dir().join("e_curve.csv").exists());

        let missing = config(
            serde_json::json!({"scenario": "amplitude-error", "seed": 0, "cross_sections": "/no/such/table.csv", "sigma": 0.05}),
            dir.path(),
        );
        assert!(matches!(run(&missing), Err(QemError::DataRequired { .. })));
        let absent = config(
            serde_json::json!({"scenario": "amplitude-error", "seed": 0, "sigma": 0.05}),
            dir.path(),
        );
        assert!(matches!(run(&absent), Err(QemError::DataRequired { .. })));
    }

    #[test]
    fn feasibility_scenario_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            serde_json::json!({"scenario": "feasibility", "seed": 0,
                "circuit": {"length_m": 1e-4, "flux_phi0": 1.0, "width_m": 1e-5}}),
            dir.path(),
        );
        run(&cfg).unwrap();
        let s = load_summary(&cfg.run_dir()).unwrap();
        assert!((s.metrics["delta_q_formal"] - 2.335).abs() < 5e-4);
        assert!((s.metrics["deflection_ratio"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multipass_and_structure_runs() {
        let dir = tempfile::tempdir().unwrap();
        let map_path = dir.path().join("map.csv");
        PhaseMap::single_pixel(4, (1, 1), 0.01)
            .unwrap()
            .save(&map_path, None)
            .unwrap();
        let cfg = config(
            serde_json::json!({"scenario": "multipass", "seed": 3, "passes": 5, "phase_map": map_path}),
            dir.path(),
        );
        run(&cfg).unwrap();
        let s = load_summary(&cfg.run_dir()).unwrap();
        let r = s.metrics["max_linearization_residual"];
        assert!(r < 0.05f64.powi(2), "{r}");

        let cfg = config(
            serde_json::json!({"scenario": "structure-search", "seed": 4, "d": 4, "n": 4, "k": 20, "trials": 4, "oracle": "ideal"}),
            dir.path(),
        );
        run(&cfg).unwrap();
        let s = load_summary(&cfg.run_dir()).unwrap();
        assert_eq!(s.metrics["electrons_per_trial"], 20.0);
        assert_eq!(s.metrics["classical_electrons"], 40.0);
    }
}
