//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit
//! if any criterion failed. Runs without the libtest harness so the lines
//! are always printed.
//!
//! Set `QEM_NIST_TABLE` to a cross-section CSV to run criterion 6 on real
//! data; otherwise it runs on the bundled screened-Rutherford table and the
//! line says so.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use qem_core::algorithms::{
    analytic_grover_success, classical_pixel_scan, classical_structure_search, default_structure_iterations,
    grover_pixel_search, grover_structure_search,
};
use qem_core::diffraction::{
    amplitude_error, default_grid, normalization_check, phi_steps_for, scatter_profile, scattering_probability,
    PHI_STEPS,
};
use qem_core::experiment::{self, compare, load_summary, run_trials, ExperimentConfig};
use qem_core::feasibility::{back_action, charge_fluctuation};
use qem_core::oracle::{oracle_call_ideal, oracle_call_physical, oracle_call_physical_forced};
use qem_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn timed(budget: Duration, f: impl FnOnce() -> Result<Outcome>) -> (Outcome, Duration) {
    let start = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let elapsed = start.elapsed();
    if elapsed > budget {
        let detail = format!("{}; over time budget {:.0?}", out.detail, budget);
        return (Outcome::new(false, detail), elapsed);
    }
    (out, elapsed)
}

fn pixel_layout(d: usize) -> RegisterLayout {
    RegisterLayout::new([("x", d), ("y", d)]).unwrap()
}

fn random_map(d: usize, rng: &mut ChaCha20Rng) -> PhaseMap {
    use rand::Rng;
    PhaseMap::new(d, (0..d * d).map(|_| rng.random_range(-PI..PI)).collect()).unwrap()
}

fn oracle_equivalence() -> Result<Outcome> {
    let noise = NoiseConfig::noise_free();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for d in [2, 4] {
        let map = random_map(d, &mut rng);
        let mut states: Vec<StateVector> = (0..d * d)
            .map(|i| StateVector::new_basis_state(pixel_layout(d), &[i / d, i % d]).unwrap())
            .collect();
        states.extend((0..8).map(|_| StateVector::random(pixel_layout(d), &mut rng)));
        for s0 in &states {
            let mut ideal = s0.clone();
            oracle_call_ideal(&mut ideal, [0, 1], &map, &mut DoseLedger::new(d))?;
            for kl in 0..d * d {
                let mut phys = s0.clone();
                oracle_call_physical_forced(
                    &mut phys,
                    [0, 1],
                    &map,
                    &noise,
                    &mut rng,
                    &mut DoseLedger::new(d),
                    (kl / d, kl % d),
                )?;
                worst = worst.max(phys.phase_aligned_distance(&ideal));
                checks += 1;
            }
        }
    }
    for d in [8, 16] {
        let map = random_map(d, &mut rng);
        for _ in 0..1000 {
            let s0 = StateVector::random(pixel_layout(d), &mut rng);
            let mut ideal = s0.clone();
            oracle_call_ideal(&mut ideal, [0, 1], &map, &mut DoseLedger::new(d))?;
            let mut phys = s0;
            oracle_call_physical(&mut phys, [0, 1], &map, &noise, &mut rng, &mut DoseLedger::new(d))?;
            worst = worst.max(phys.phase_aligned_distance(&ideal));
            checks += 1;
        }
    }
    Ok(Outcome::new(
        worst <= 1e-10,
        format!("{checks} checks, max error {worst:.2e} (tol 1e-10)"),
    ))
}

fn grover_pixel() -> Result<Outcome> {
    let mode = OracleMode::Physical(NoiseConfig::noise_free());
    let mut worst = 0.0f64;
    for d in [2, 4, 8] {
        let map = PhaseMap::single_pixel(d, (d - 1, d / 2), PI)?;
        for s in 0..=2 * d {
            let r = grover_pixel_search(&map, 1, s, &mode, &mut ChaCha20Rng::seed_from_u64(s as u64))?;
            worst = worst.max((r.success_probability - analytic_grover_success(d * d, s)).abs());
        }
    }
    let map = PhaseMap::single_pixel(4, (2, 1), PI)?;
    let trials = 10_000;
    let hits = run_trials(42, trials, |_, rng| {
        Ok(grover_pixel_search(&map, 1, 3, &mode, rng)?.success)
    })?
    .into_iter()
    .filter(|&s| s)
    .count();
    let rate = hits as f64 / trials as f64;
    Ok(Outcome::new(
        worst <= 1e-6 && (rate - 0.961).abs() <= 0.01,
        format!("max |P - sin²((2s+1)asin(1/d))| = {worst:.1e} (tol 1e-6); d=4 s=3 sampled {rate:.4} (0.961 ± 0.01)"),
    ))
}

fn marked_dose(d: usize, iterations: usize) -> Result<f64> {
    let map = PhaseMap::single_pixel(d, (3, 5), PI)?;
    let mode = OracleMode::Physical(NoiseConfig::noise_free());
    let r = grover_pixel_search(&map, 1, iterations, &mode, &mut ChaCha20Rng::seed_from_u64(3))?;
    Ok(r.ledger.at(3, 5))
}

fn dose_advantage() -> Result<Outcome> {
    let d = 8;
    // The continuum dose integral runs until the marked amplitude peaks; in
    // the discrete search that is ⌈πd/4⌉ = 7 iterations at d = 8.
    let full = marked_dose(d, qem_core::algorithms::default_pixel_iterations(d))?;
    let literal = marked_dose(d, d)?;
    let map = PhaseMap::single_pixel(d, (3, 5), PI)?;
    let classical = classical_pixel_scan(&map, &mut ChaCha20Rng::seed_from_u64(3))?
        .ledger
        .at(3, 5);
    let target = d as f64 / 2.0;
    let pass = (full / target - 1.0).abs() <= 0.15 && (classical - 1.0).abs() <= 1e-12;
    Ok(Outcome::new(
        pass,
        format!(
            "quantum dose over the full 7-iteration search {full:.3} vs d/2 = {target} ({:+.1}%); classical {classical}; \
             [info] through exactly d = 8 iterations {literal:.3} ({:+.1}%)",
            100.0 * (full / target - 1.0),
            100.0 * (literal / target - 1.0)
        ),
    ))
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn structure_scaling() -> Result<Outcome> {
    let (d, k, trials) = (4, 300, 20);
    let mode = OracleMode::Physical(NoiseConfig::noise_free());
    let sizes = [4usize, 8, 16, 32];
    let mut quantum = Vec::new();
    let mut classical = Vec::new();
    let mut parts = Vec::new();
    let mut all_succeed = true;
    for &n in &sizes {
        let results = run_trials(1000 + n as u64, trials, |_, rng| {
            let (set, truth, _) = CandidateSet::synthetic(d, n, k, BijectionStrategy::LocalityBalanced, rng)?;
            let q = grover_structure_search(&set, &truth, None, &mode, rng)?;
            let c = classical_structure_search(&set, &truth, &mode, rng)?;
            Ok((q, c))
        })?;
        let t = trials as f64;
        let p = results.iter().map(|(q, _)| q.success_probability).sum::<f64>() / t;
        let sampled = results.iter().filter(|(q, _)| q.success).count() as f64 / t;
        let e_q = results.iter().map(|(q, _)| q.electrons_used as f64).sum::<f64>() / t;
        let e_c = results.iter().map(|(_, c)| c.electrons_used as f64).sum::<f64>() / t;
        all_succeed &= p >= 0.9;
        quantum.push(e_q);
        classical.push(e_c);
        parts.push(format!(
            "N={n}: s={} P={p:.3} sampled={sampled:.2} e={e_q:.0} classical e={e_c:.0}",
            default_structure_iterations(n)
        ));
    }
    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let bq = log_slope(&ns, &quantum);
    let bc = log_slope(&ns, &classical);
    let pass = all_succeed && (0.4..=0.7).contains(&bq) && (bc - 1.0).abs() <= 0.05;
    Ok(Outcome::new(
        pass,
        format!(
            "d={d} k={k}, {trials} trials per N; {}; exponent {bq:.3} (0.4-0.7), classical {bc:.3} (1 ± 0.05)",
            parts.join("; ")
        ),
    ))
}

fn amplitude_properties() -> Result<Outcome> {
    let table = CrossSectionTable::screened_rutherford();
    let grid = table.theta().to_vec();
    let comp = Composition::default();
    let mut failures = Vec::new();
    let mut e_a = |p_s: f64, sigma: f64, phi: usize| -> Result<AmplitudeErrorResult> {
        let s = scatter_profile(&table, &comp, p_s)?;
        let r = amplitude_error(&grid, &s, &BeamProfile::new(sigma)?, p_s, phi)?;
        if r.var_b[0] != 0.0 {
            failures.push(format!("VarB(0) = {:e} at p_S={p_s} σ={sigma}", r.var_b[0]));
        }
        if r.e_curve.iter().any(|e| !(0.0..=1.0).contains(e)) {
            failures.push(format!("E outside [0,1] at p_S={p_s} σ={sigma}"));
        }
        Ok(r)
    };
    let zero = e_a(0.0, 0.05, PHI_STEPS)?.e_a;
    let sigmas = [0.010, 0.020, 0.030, 0.040, 0.050];
    let by_sigma: Vec<f64> = sigmas
        .iter()
        .map(|&s| e_a(0.05, s, PHI_STEPS).map(|r| r.e_a))
        .collect::<Result<_>>()?;
    let p_values = [0.02, 0.05, 0.1];
    let by_p: Vec<f64> = p_values
        .iter()
        .map(|&p| e_a(p, 0.03, PHI_STEPS).map(|r| r.e_a))
        .collect::<Result<_>>()?;
    let mut shift = 0.0f64;
    for sigma in [0.010, 0.050] {
        let coarse = e_a(0.05, sigma, PHI_STEPS)?.e_a;
        let fine = e_a(0.05, sigma, 2 * PHI_STEPS)?.e_a;
        shift = shift.max((fine / coarse - 1.0).abs());
    }
    let iso = CrossSectionTable::isotropic(default_grid(), 1.0)?;
    let s_iso = scatter_profile(&iso, &comp, 0.05)?;
    let mut residual = 0.0f64;
    for sigma in [0.010, 0.050] {
        let beam = BeamProfile::new(sigma)?;
        residual = residual.max(normalization_check(iso.theta(), &s_iso, &beam, 0.05, phi_steps_for(sigma)).relative);
    }
    // Fixed π/100 cells are coarser than a 10 mrad beam at large angles.
    let coarse = normalization_check(iso.theta(), &s_iso, &BeamProfile::new(0.010)?, 0.05, PHI_STEPS).relative;
    let falls_with_sigma = by_sigma.windows(2).all(|w| w[1] < w[0]);
    let rises_with_p = by_p.windows(2).all(|w| w[1] > w[0]);
    let pass =
        failures.is_empty() && zero == 0.0 && falls_with_sigma && rises_with_p && residual <= 0.02 && shift < 0.01;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.4}", x)).collect::<Vec<_>>().join(" ");
    Ok(Outcome::new(
        pass,
        format!(
            "VarB(0)=0 and E in [0,1]: {}; e_A(p_S=0)={zero}; e_A vs σ 10..50 mrad [{}] decreasing={falls_with_sigma}; \
             vs p_S 0.02/0.05/0.1 [{}] increasing={rises_with_p}; isotropic residual {:.3}% (≤2%, φ cells max(100, ⌈π/σ⌉)); φ doubling shift {:.3}% (<1%); \
             [info] isotropic residual at σ=10 mrad with 100 φ cells {:.1}%",
            if failures.is_empty() { "ok".to_string() } else { failures.join(", ") },
            fmt(&by_sigma),
            fmt(&by_p),
            100.0 * residual,
            100.0 * shift,
            100.0 * coarse
        ),
    ))
}

fn amplitude_data() -> Result<Outcome> {
    let (table, label) = match std::env::var_os("QEM_NIST_TABLE") {
        Some(path) => (
            CrossSectionTable::load(Path::new(&path))?,
            format!("table {}", Path::new(&path).display()),
        ),
        None => (
            CrossSectionTable::screened_rutherford(),
            "bundled screened-Rutherford surrogate (QEM_NIST_TABLE unset)".to_string(),
        ),
    };
    let comp = Composition::default();
    let grid = table.theta().to_vec();
    let targets = [
        (0.05, 0.050, 0.037),
        (0.05, 0.010, 0.088),
        (0.1, 0.050, 0.054),
        (0.1, 0.010, 0.13),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (p_s, sigma, expect) in targets {
        let s = scatter_profile(&table, &comp, p_s)?;
        let e = amplitude_error(&grid, &s, &BeamProfile::new(sigma)?, p_s, PHI_STEPS)?.e_a;
        let rel = e / expect - 1.0;
        pass &= rel.abs() <= 0.15;
        parts.push(format!(
            "p_S={p_s} σ={:.0}mrad e_A={:.2}% vs {:.1}% ({:+.1}%)",
            sigma * 1e3,
            100.0 * e,
            100.0 * expect,
            100.0 * rel
        ));
    }
    let p30 = scattering_probability(1.8e-3, 30.0);
    let p50 = scattering_probability(1.8e-3, 50.0);
    pass &= (p30 - 0.054).abs() <= 1e-12 && (p50 - 0.090).abs() <= 1e-12;
    Ok(Outcome::new(
        pass,
        format!("{label}; {}; p_S(30nm)={p30:.4} p_S(50nm)={p50:.4}", parts.join("; ")),
    ))
}

fn feasibility_arithmetic() -> Result<Outcome> {
    let k = CODATA_2018;
    let ratio = k.z0() / k.r_k();
    let identity = (ratio / (2.0 * k.alpha) - 1.0).abs();
    let free = CircuitParams::free_space(1e-4, &k)?;
    let dq = charge_fluctuation(&free, &k).formal;
    let report = back_action(&free, &k)?;
    let pm = report.p_ex_magnetic.reduced;
    let pe = report.p_ex_electric.reduced;
    let pass = (ratio - 0.01461).abs() <= 1e-4
        && identity <= 1e-4
        && (dq - 2.335).abs() <= 5e-4
        && (pm - ratio).abs() <= 1e-12 * ratio
        && (pe - ratio).abs() <= 1e-12 * ratio
        && (0.001..0.1).contains(&pm);
    Ok(Outcome::new(
        pass,
        format!(
            "Z0/R_K={ratio:.6} (0.01461 ± 1e-4), |Z0/(2αR_K) - 1|={identity:.1e}; δq={dq:.4} e; \
             p_ex reduced magnetic={pm:.5} electric={pe:.5}; formal magnetic={:.4} electric={:.4}",
            report.p_ex_magnetic.formal, report.p_ex_electric.formal
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let map_path = dir.path().join("map.csv");
    PhaseMap::single_pixel(4, (1, 2), 0.02)?
        .zero_mean()
        .save(&map_path, None)?;
    let configs = [
        serde_json::json!({"scenario": "oracle-verify", "seed": 11, "d": 4, "trials": 50}),
        serde_json::json!({"scenario": "grover-pixel", "seed": 12, "d": 4, "k": 1, "iterations": 3, "trials": 500}),
        serde_json::json!({"scenario": "structure-search", "seed": 13, "d": 4, "n": 8, "k": 40, "trials": 8,
            "noise": {"amp_error": 0.01, "inelastic_prob": 0.01, "collapse_radius": 1}}),
        serde_json::json!({"scenario": "multipass", "seed": 14, "passes": 4, "phase_map": map_path, "trials": 3,
            "noise": {"amp_error": 0.02}}),
        serde_json::json!({"scenario": "amplitude-error", "seed": 15, "cross_sections": "bundled", "p_s": 0.05, "sigma": 0.03}),
        serde_json::json!({"scenario": "feasibility", "seed": 16, "circuit": {"length_m": 1e-4}}),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for json in configs {
        let mut cfg: ExperimentConfig = serde_json::from_value(json).map_err(|e| QemError::Config(e.to_string()))?;
        cfg.output_dir = dir.path().join("out");
        let first = experiment::run(&cfg)?;
        let read_all = |files: &[String]| -> Result<Vec<Vec<u8>>> {
            files
                .iter()
                .filter(|f| f.as_str() != "manifest.json")
                .map(|f| Ok(fs::read(cfg.run_dir().join(f))?))
                .collect()
        };
        let a = read_all(&first.files)?;
        let sa = load_summary(&cfg.run_dir())?;
        let second = experiment::run(&cfg)?;
        let b = read_all(&second.files)?;
        let report = compare(&sa, &load_summary(&cfg.run_dir())?)?;
        let same = a == b && first.files == second.files;
        pass &= same && report.identical && report.max_abs_diff == 0.0;
        parts.push(format!(
            "{} files={} identical={same} drift={}",
            cfg.scenario.name(),
            a.len(),
            report.max_abs_diff
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

type Criterion = (&'static str, Duration, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 8] = [
        (
            "oracle pipeline equivalence",
            Duration::from_secs(10),
            oracle_equivalence,
        ),
        ("grover pixel search", Duration::from_secs(30), grover_pixel),
        ("dose advantage", Duration::from_secs(30), dose_advantage),
        ("structure search scaling", Duration::from_secs(300), structure_scaling),
        (
            "amplitude error, property tier",
            Duration::from_secs(120),
            amplitude_properties,
        ),
        ("amplitude error, data tier", Duration::from_secs(300), amplitude_data),
        ("feasibility arithmetic", Duration::from_secs(1), feasibility_arithmetic),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let (out, elapsed) = timed(budget, f);
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {verdict} [{name}] ({:.2}s) {}",
            i + 1,
            elapsed.as_secs_f64(),
            out.detail
        );
        failed += usize::from(!out.pass);
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
