//! Run orchestration for batch experiments: flat key=value configuration,
//! the five run modes, and bundle emission.
//!
//! A configuration is plain text, one `key = value` per line, `#` starting
//! a comment, with dotted namespaces (`mfg.gamma = 2.0`). Parsing is
//! strict: unknown or duplicated keys are errors, so a typo cannot
//! silently fall back to a default. Every run mode writes its artifacts
//! under one output directory and returns a process exit code:
//!
//! - 0: the run completed (for probes, completion includes a failed solve,
//!   since the failure signature is the result),
//! - 2: configuration or environment error, nothing was computed,
//! - 3: solver failure (the trace is still written) or verification drift,
//! - 4: oracle check failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::choquard::{self, ChoquardParams};
use crate::diagnostics::{self, DiagnosticsReport};
use crate::error::{MfgError, Result};
use crate::grid::{Grid, ScalarField, integrate};
use crate::hjb::{self, HjbParams};
use crate::kfp::{self, KfpParams};
use crate::mfg::{MfgParams, MfgSolution, Potential, SolveFailure, fixed_point_solve};
use crate::report::{self, JVal};
use crate::riesz::RieszOperator;
use crate::special::erf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Solve,
    Sweep,
    Verify,
    Oracle,
    NonexistProbe,
}

impl Mode {
    fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "solve" => Mode::Solve,
            "sweep" => Mode::Sweep,
            "verify" => Mode::Verify,
            "oracle" => Mode::Oracle,
            "nonexist-probe" => Mode::NonexistProbe,
            other => {
                return Err(MfgError::Config(format!(
                    "mode must be one of solve, sweep, verify, oracle, nonexist-probe; got {other}"
                )));
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Mass,
    Alpha,
    Gamma,
    Nodes,
}

impl SweepParameter {
    fn parse(s: &str) -> Result<SweepParameter> {
        Ok(match s {
            "mass" => SweepParameter::Mass,
            "alpha" => SweepParameter::Alpha,
            "gamma" => SweepParameter::Gamma,
            "nodes" => SweepParameter::Nodes,
            other => {
                return Err(MfgError::Config(format!(
                    "sweep.parameter must be one of mass, alpha, gamma, nodes; got {other}"
                )));
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub params: MfgParams,
    pub sweep: Option<SweepAxis>,
    pub out_dir: PathBuf,
    pub verify_bundle: Option<PathBuf>,
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MfgError::Config(format!(
                "line {}: expected key = value, got {line:?}",
                idx + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(MfgError::Config(format!(
                "line {}: empty key or value",
                idx + 1
            )));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(MfgError::Config(format!(
                "line {}: duplicate key {key}",
                idx + 1
            )));
        }
    }
    Ok(map)
}

fn take(map: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
    map.remove(key)
}

fn take_f64(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<f64>> {
    take(map, key)
        .map(|v| {
            v.parse()
                .map_err(|e| MfgError::Config(format!("{key}: {e} (value {v:?})")))
        })
        .transpose()
}

fn take_usize(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<usize>> {
    take(map, key)
        .map(|v| {
            v.parse()
                .map_err(|e| MfgError::Config(format!("{key}: {e} (value {v:?})")))
        })
        .transpose()
}

fn take_bool(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<bool>> {
    take(map, key)
        .map(|v| match v.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(MfgError::Config(format!(
                "{key}: expected true or false, got {other}"
            ))),
        })
        .transpose()
}

fn take_f64_list(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<Vec<f64>>> {
    take(map, key)
        .map(|v| {
            v.split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e| {
                        MfgError::Config(format!("{key}: {e} (item {:?})", item.trim()))
                    })
                })
                .collect()
        })
        .transpose()
}

impl RunConfig {
    /// Parse and validate a configuration. Every key is consumed exactly
    /// once; anything left over is reported as unknown.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut kv = parse_pairs(text)?;

        let mode = Mode::parse(&take(&mut kv, "mode").ok_or_else(|| {
            MfgError::Config("missing required key: mode".into())
        })?)?;

        let dim = take_usize(&mut kv, "grid.dim")?.unwrap_or(1);
        let half_width = take_f64(&mut kv, "grid.half_width")?.unwrap_or(6.0);
        let nodes = take_usize(&mut kv, "grid.nodes")?.unwrap_or(129);
        let grid = Grid::new(dim, half_width, nodes)?;

        let gamma = take_f64(&mut kv, "mfg.gamma")?.unwrap_or(2.0);
        let alpha = take_f64(&mut kv, "mfg.alpha")?.unwrap_or(0.5);
        let mass = take_f64(&mut kv, "mfg.mass")?.unwrap_or(1.0);
        let mut params = MfgParams::new(grid, gamma, alpha, mass);
        if let Some(v) = take_f64(&mut kv, "mfg.damping")? {
            params.damping = v;
        }
        if let Some(v) = take_f64(&mut kv, "mfg.tol")? {
            params.tol = v;
        }
        if let Some(v) = take_usize(&mut kv, "mfg.max_outer")? {
            params.max_outer = v;
        }
        if let Some(v) = take_f64(&mut kv, "mfg.p_bar")? {
            params.p_bar = Some(v);
        }
        if let Some(v) = take_f64(&mut kv, "mfg.concentration_ceiling")? {
            params.concentration_ceiling = Some(v);
        }
        if let Some(v) = take_f64(&mut kv, "mfg.c1")? {
            params.c1 = v;
        }
        if let Some(v) = take_f64(&mut kv, "mfg.c2")? {
            params.c2 = v;
        }
        if let Some(v) = take_f64_list(&mut kv, "mfg.mollifier_orders")? {
            params.mollifier_orders = v;
        }
        if let Some(v) = take_bool(&mut kv, "mfg.probe_override")? {
            params.probe_override = v;
        }
        if let Some(v) = take_bool(&mut kv, "mfg.decoupled")? {
            params.decoupled = v;
        }

        let kind = take(&mut kv, "potential.kind").unwrap_or_else(|| "zero".into());
        let coeff = take_f64(&mut kv, "potential.coeff")?;
        let exponent = take_f64(&mut kv, "potential.exponent")?;
        params.potential = match kind.as_str() {
            "zero" => {
                if coeff.is_some() || exponent.is_some() {
                    return Err(MfgError::Config(
                        "potential.coeff/exponent are only valid with potential.kind = power"
                            .into(),
                    ));
                }
                Potential::Zero
            }
            "power" => Potential::Power {
                coeff: coeff.unwrap_or(1.0),
                exponent: exponent.unwrap_or(2.0),
            },
            other => {
                return Err(MfgError::Config(format!(
                    "potential.kind must be zero or power, got {other}"
                )));
            }
        };

        let out_dir = PathBuf::from(take(&mut kv, "out.dir").unwrap_or_else(|| "out".into()));
        let sweep_parameter = take(&mut kv, "sweep.parameter");
        let sweep_values = take_f64_list(&mut kv, "sweep.values")?;
        let verify_bundle = take(&mut kv, "verify.bundle").map(PathBuf::from);

        if !kv.is_empty() {
            let keys: Vec<&str> = kv.keys().map(String::as_str).collect();
            return Err(MfgError::Config(format!(
                "unknown keys: {}",
                keys.join(", ")
            )));
        }

        let sweep = match (sweep_parameter, sweep_values) {
            (Some(p), Some(values)) => {
                if values.is_empty() {
                    return Err(MfgError::Config("sweep.values must be non-empty".into()));
                }
                Some(SweepAxis {
                    parameter: SweepParameter::parse(&p)?,
                    values,
                })
            }
            (None, None) => None,
            _ => {
                return Err(MfgError::Config(
                    "sweep.parameter and sweep.values must be given together".into(),
                ));
            }
        };

        match mode {
            Mode::Sweep if sweep.is_none() => {
                return Err(MfgError::Config(
                    "sweep mode requires sweep.parameter and sweep.values".into(),
                ));
            }
            Mode::Verify if verify_bundle.is_none() => {
                return Err(MfgError::Config(
                    "verify mode requires verify.bundle pointing at a solve bundle".into(),
                ));
            }
            Mode::NonexistProbe if !params.potential.is_zero() => {
                return Err(MfgError::Config(
                    "nonexist-probe requires potential.kind = zero".into(),
                ));
            }
            _ => {}
        }

        params.validate()?;
        Ok(RunConfig {
            mode,
            params,
            sweep,
            out_dir,
            verify_bundle,
        })
    }
}

/// Initialize logging from the MFGLAB_LOG environment variable.
pub fn init_logging() -> Result<()> {
    let level = std::env::var("MFGLAB_LOG").unwrap_or_else(|_| "error".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(MfgError::Config(format!(
            "MFGLAB_LOG must be one of error, info, debug; got {level}"
        )));
    }
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .try_init();
    Ok(())
}

/// Execute a parsed configuration and return the process exit code.
pub fn run(config: &RunConfig, jobs: usize) -> i32 {
    match run_inner(config, jobs) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            match e {
                MfgError::Config(_) | MfgError::InvalidParameter(_) | MfgError::Io(_) => {
                    EXIT_CONFIG
                }
                _ => EXIT_SOLVER,
            }
        }
    }
}

fn run_inner(config: &RunConfig, jobs: usize) -> Result<i32> {
    if jobs == 0 {
        return Err(MfgError::Config("jobs must be at least 1".into()));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    match config.mode {
        Mode::Solve => run_solve(&config.params, &config.out_dir),
        Mode::Sweep => run_sweep(
            &config.params,
            config.sweep.as_ref().expect("validated at parse"),
            &config.out_dir,
            jobs,
        ),
        Mode::Verify => run_verify(
            config.verify_bundle.as_ref().expect("validated at parse"),
            &config.out_dir,
        ),
        Mode::Oracle => run_oracle(&config.out_dir),
        Mode::NonexistProbe => run_probe(&config.params, &config.out_dir),
    }
}

fn diagnose_solution(params: &MfgParams, sol: &MfgSolution) -> Result<Option<DiagnosticsReport>> {
    if params.decoupled {
        return Ok(None);
    }
    let op = RieszOperator::new(params.grid, params.alpha)?;
    let vfield = params.potential.eval(params.grid);
    let pref = (!params.potential.is_zero()).then_some(&vfield);
    Ok(Some(diagnostics::diagnose(
        &sol.u,
        &sol.m,
        sol.lambda,
        params.gamma,
        &op,
        pref,
    )?))
}

fn write_bundle(params: &MfgParams, sol: &MfgSolution, dir: &Path) -> Result<()> {
    let diag = diagnose_solution(params, sol)?;
    report::write_field_csv(&dir.join("u.csv"), &sol.u)?;
    report::write_field_csv(&dir.join("m.csv"), &sol.m)?;
    std::fs::write(
        dir.join("report.json"),
        report::solve_report(params, sol, diag.as_ref()).to_json_string(),
    )?;
    Ok(())
}

fn run_solve(params: &MfgParams, out: &Path) -> Result<i32> {
    match fixed_point_solve(params) {
        Ok(sol) => {
            write_bundle(params, &sol, out)?;
            println!(
                "solve: converged in {} iterations, lambda = {:.12e}, self-consistency = {:.3e}",
                sol.outer_iterations, sol.lambda, sol.self_consistency
            );
            Ok(EXIT_OK)
        }
        Err(failure) => {
            std::fs::write(
                out.join("report.json"),
                report::failure_report(params, &failure).to_json_string(),
            )?;
            eprintln!("solve failed: {}", failure.error);
            Ok(EXIT_SOLVER)
        }
    }
}

fn axis_point(base: &MfgParams, axis: &SweepAxis, value: f64) -> Result<MfgParams> {
    let mut p = base.clone();
    match axis.parameter {
        SweepParameter::Mass => p.mass = value,
        SweepParameter::Alpha => p.alpha = value,
        SweepParameter::Gamma => p.gamma = value,
        SweepParameter::Nodes => {
            if value.fract() != 0.0 || value < 8.0 {
                return Err(MfgError::Config(format!(
                    "sweep over nodes needs integers >= 8, got {value}"
                )));
            }
            p.grid = Grid::new(base.grid.dim(), base.grid.half_width(), value as usize)?;
        }
    }
    p.validate()?;
    Ok(p)
}

fn run_sweep(base: &MfgParams, axis: &SweepAxis, out: &Path, jobs: usize) -> Result<i32> {
    let points: Vec<MfgParams> = axis
        .values
        .iter()
        .map(|&v| axis_point(base, axis, v))
        .collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| MfgError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<MfgSolution, SolveFailure>> =
        pool.install(|| points.par_iter().map(fixed_point_solve).collect());

    let mut summary = String::from(report::SWEEP_HEADER);
    let mut converged = 0usize;
    for (i, (params, outcome)) in points.iter().zip(&outcomes).enumerate() {
        let dir = out.join(format!("sweep_{i:03}"));
        std::fs::create_dir_all(&dir)?;
        match outcome {
            Ok(sol) => {
                converged += 1;
                write_bundle(params, sol, &dir)?;
            }
            Err(failure) => {
                std::fs::write(
                    dir.join("report.json"),
                    report::failure_report(params, failure).to_json_string(),
                )?;
            }
        }
        summary.push_str(&report::sweep_row(params, outcome));
    }
    std::fs::write(out.join("summary.csv"), &summary)?;
    println!(
        "sweep: {converged}/{} points converged, summary in {}",
        points.len(),
        out.join("summary.csv").display()
    );
    Ok(EXIT_OK)
}

fn json_f64(v: &serde_json::Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| MfgError::Config(format!("report is missing numeric field {key}")))
}

fn json_u64(v: &serde_json::Value, key: &str) -> Result<u64> {
    v.get(key)
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| MfgError::Config(format!("report is missing integer field {key}")))
}

fn params_from_report(rep: &serde_json::Value) -> Result<MfgParams> {
    let p = rep
        .get("params")
        .ok_or_else(|| MfgError::Config("report has no params section".into()))?;
    let gj = p
        .get("grid")
        .ok_or_else(|| MfgError::Config("report has no grid section".into()))?;
    let grid = Grid::new(
        json_u64(gj, "dim")? as usize,
        json_f64(gj, "half_width")?,
        json_u64(gj, "points_per_axis")? as usize,
    )?;
    let mut params = MfgParams::new(
        grid,
        json_f64(p, "gamma")?,
        json_f64(p, "alpha")?,
        json_f64(p, "mass")?,
    );
    let pot = p
        .get("potential")
        .ok_or_else(|| MfgError::Config("report has no potential section".into()))?;
    params.potential = match pot.get("kind").and_then(serde_json::Value::as_str) {
        Some("zero") => Potential::Zero,
        Some("power") => Potential::Power {
            coeff: json_f64(pot, "coeff")?,
            exponent: json_f64(pot, "exponent")?,
        },
        other => {
            return Err(MfgError::Config(format!(
                "unrecognized potential kind {other:?}"
            )));
        }
    };
    params.decoupled = p
        .get("decoupled")
        .and_then(serde_json::Value::as_bool)
        .unwrap_or(false);
    Ok(params)
}

/// Largest relative difference over numeric leaves; structural mismatch is
/// an error.
fn json_drift(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Result<f64> {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            Ok((x - y).abs() / (1.0 + x.abs().max(y.abs())))
        }
        (Value::Object(x), Value::Object(y)) => {
            if x.len() != y.len() || x.keys().any(|k| !y.contains_key(k)) {
                return Err(MfgError::Config(format!(
                    "verification mismatch at {path}: object keys differ"
                )));
            }
            let mut worst = 0.0f64;
            for (k, xv) in x {
                worst = worst.max(json_drift(xv, &y[k], &format!("{path}.{k}"))?);
            }
            Ok(worst)
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                return Err(MfgError::Config(format!(
                    "verification mismatch at {path}: array lengths differ"
                )));
            }
            let mut worst = 0.0f64;
            for (i, (xv, yv)) in x.iter().zip(y).enumerate() {
                worst = worst.max(json_drift(xv, yv, &format!("{path}[{i}]"))?);
            }
            Ok(worst)
        }
        (Value::Null, Value::Null) => Ok(0.0),
        (Value::Bool(x), Value::Bool(y)) if x == y => Ok(0.0),
        (Value::String(x), Value::String(y)) if x == y => Ok(0.0),
        _ => Err(MfgError::Config(format!(
            "verification mismatch at {path}: {a} vs {b}"
        ))),
    }
}

fn run_verify(bundle: &Path, out: &Path) -> Result<i32> {
    let rep = report::read_json(&bundle.join("report.json"))?;
    if rep.get("converged").and_then(serde_json::Value::as_bool) != Some(true) {
        return Err(MfgError::Config(format!(
            "{}: bundle records a failed solve; nothing to verify",
            bundle.display()
        )));
    }
    let params = params_from_report(&rep)?;
    let u = report::read_field_csv(&bundle.join("u.csv"), params.grid)?;
    let m = report::read_field_csv(&bundle.join("m.csv"), params.grid)?;
    let lambda = json_f64(&rep, "lambda")?;

    let op = RieszOperator::new(params.grid, params.alpha)?;
    let vfield = params.potential.eval(params.grid);
    let pref = (!params.potential.is_zero()).then_some(&vfield);
    let fresh = diagnostics::diagnose(&u, &m, lambda, params.gamma, &op, pref)?;
    let fresh_json = report::diagnostics_json(&fresh);

    let mut verdict = JVal::obj();
    verdict.push("schema", JVal::Str("mfglab.verify/1".into()));
    verdict.push("bundle", JVal::Str(bundle.display().to_string()));
    let code = match rep.get("diagnostics") {
        Some(stored) => {
            let fresh_val: serde_json::Value =
                serde_json::from_str(&fresh_json.to_json_string())
                    .expect("writer output is valid JSON");
            let drift = json_drift(stored, &fresh_val, "diagnostics")?;
            let pass = drift <= 1e-9;
            verdict.push("max_drift", JVal::Num(drift));
            verdict.push("pass", JVal::Bool(pass));
            println!(
                "verify: {} (max drift {drift:.3e})",
                if pass { "PASS" } else { "FAIL" }
            );
            if pass { EXIT_OK } else { EXIT_SOLVER }
        }
        None => {
            // bundle predates diagnostics (decoupled run): just record them
            verdict.push("max_drift", JVal::Null);
            verdict.push("pass", JVal::Bool(true));
            println!("verify: PASS (no stored diagnostics; fresh ones recorded)");
            EXIT_OK
        }
    };
    verdict.push("diagnostics", fresh_json);
    std::fs::write(out.join("verify.json"), verdict.to_json_string())?;
    Ok(code)
}

fn run_probe(params: &MfgParams, out: &Path) -> Result<i32> {
    let mut p = params.clone();
    p.probe_override = true;
    match fixed_point_solve(&p) {
        Ok(sol) => {
            write_bundle(&p, &sol, out)?;
            let cert = diagnostics::nonexistence_certificate(
                p.grid.dim(),
                p.alpha,
                p.gamma,
                sol.lambda,
                RieszOperator::new(p.grid, p.alpha)?.pairing(&sol.m, &sol.m),
                integrate(&sol.m),
            );
            println!("probe: solve converged; certificate {cert:?}");
            Ok(EXIT_OK)
        }
        Err(failure) => {
            let cert = failure.trace.last().map(|e| {
                diagnostics::nonexistence_certificate(
                    p.grid.dim(),
                    p.alpha,
                    p.gamma,
                    e.lambda,
                    e.interaction,
                    p.mass,
                )
            });
            let mut j = report::failure_report(&p, &failure);
            j.push(
                "certificate",
                cert.as_ref()
                    .map_or(JVal::Null, |c| certificate_value(c)),
            );
            std::fs::write(out.join("report.json"), j.to_json_string())?;
            println!(
                "probe: solve failed ({}); certificate {:?}",
                report::error_kind(&failure.error),
                cert
            );
            // a probe that produces a failure signature has done its job
            Ok(EXIT_OK)
        }
    }
}

fn certificate_value(c: &diagnostics::Certificate) -> JVal {
    use diagnostics::Certificate;
    let mut j = JVal::obj();
    match c {
        Certificate::SignConflict {
            lambda,
            interaction,
        } => {
            j.push("status", JVal::Str("SignConflict".into()));
            j.push("lambda", JVal::Num(*lambda));
            j.push("interaction", JVal::Num(*interaction));
        }
        Certificate::NotApplicable { reason } => {
            j.push("status", JVal::Str("NotApplicable".into()));
            j.push("reason", JVal::Str(reason.clone()));
        }
        Certificate::Consistent { residual } => {
            j.push("status", JVal::Str("Consistent".into()));
            j.push("residual", JVal::Num(*residual));
        }
    }
    j
}

struct OracleCheck {
    name: &'static str,
    error: f64,
    tolerance: f64,
}

impl OracleCheck {
    fn pass(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

fn oracle_gibbs() -> Result<OracleCheck> {
    let g = Grid::new(1, 8.0, 257)?;
    let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]);
    let sol = kfp::solve_stationary(&u, &KfpParams::new(2.0, 1.0))?;
    let gibbs = kfp::gibbs_density(&u, 1.0);
    let mut err = 0.0;
    for i in 0..g.node_count() {
        err += g.node_weight(i) * (sol.m.values[i] - gibbs.values[i]).abs();
    }
    Ok(OracleCheck {
        name: "gibbs_invariant_density",
        error: err,
        tolerance: 1e-6,
    })
}

fn oracle_quadratic_hjb() -> Result<OracleCheck> {
    let g = Grid::new(1, 6.0, 257)?;
    let f = ScalarField::from_fn(g, |x| x[0] * x[0]);
    let sol = hjb::solve_ergodic(&f, &HjbParams::new(2.0), None)?;
    let mut err = (sol.lambda - 2f64.sqrt()).abs();
    for i in 0..g.node_count() {
        let x = g.position(i)[0];
        if x.abs() <= 3.0 {
            err = err.max((sol.u.values[i] - x * x / 2f64.sqrt()).abs());
        }
    }
    Ok(OracleCheck {
        name: "quadratic_hjb",
        error: err,
        tolerance: 1e-6,
    })
}

fn oracle_newtonian_gaussian() -> Result<OracleCheck> {
    let sigma = 0.8;
    let g = Grid::new(3, 4.0, 49)?;
    let norm = 1.0 / (sigma * sigma * 2.0 * std::f64::consts::PI).powf(1.5);
    let m = ScalarField::from_fn(g, |x| {
        let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        norm * (-0.5 * r2 / (sigma * sigma)).exp()
    });
    let conv = RieszOperator::new(g, 2.0)?.convolve(&m);
    let mut worst: f64 = 0.0;
    for i in 0..g.node_count() {
        let r = g.radius(i);
        if r > 2.5 {
            continue; // box-truncation zone
        }
        let exact = if r < 1e-12 {
            (2.0 / std::f64::consts::PI).sqrt() / sigma
        } else {
            erf(r / (sigma * 2.0f64.sqrt())) / r
        };
        worst = worst.max((conv.values[i] - exact).abs() / exact);
    }
    Ok(OracleCheck {
        name: "newtonian_gaussian",
        error: worst,
        tolerance: 5e-3,
    })
}

fn oracle_choquard_cross_check() -> Result<OracleCheck> {
    let g = Grid::new(1, 6.0, 129)?;
    let vfield = ScalarField::from_fn(g, |x| x[0] * x[0]);
    let op = RieszOperator::new(g, 0.5)?;
    let flow =
        choquard::solve_choquard_normalized(&vfield, Some(&op), &ChoquardParams::new(1.0))?;
    let msq = flow.v.map(|x| x * x);
    let coupling = op.convolve(&msq);
    let f = ScalarField::from_values(
        g,
        vfield
            .values
            .iter()
            .zip(&coupling.values)
            .map(|(v, c)| v - c)
            .collect(),
    )?;
    let h = hjb::solve_ergodic(&f, &HjbParams::new(2.0), None)?;
    Ok(OracleCheck {
        name: "choquard_cross_check",
        error: (flow.lambda - h.lambda).abs() / (1.0 + h.lambda.abs()),
        tolerance: 1e-2,
    })
}

fn run_oracle(out: &Path) -> Result<i32> {
    let checks = [
        oracle_gibbs()?,
        oracle_quadratic_hjb()?,
        oracle_newtonian_gaussian()?,
        oracle_choquard_cross_check()?,
    ];
    let mut j = JVal::obj();
    j.push("schema", JVal::Str("mfglab.oracle/1".into()));
    let mut items = Vec::new();
    let mut all_pass = true;
    let mut lines = String::new();
    for check in &checks {
        all_pass &= check.pass();
        let mut item = JVal::obj();
        item.push("name", JVal::Str(check.name.into()));
        item.push("pass", JVal::Bool(check.pass()));
        item.push("error", JVal::Num(check.error));
        item.push("tolerance", JVal::Num(check.tolerance));
        items.push(item);
        let _ = writeln!(
            lines,
            "oracle {}: {} (error {:.3e}, tolerance {:.3e})",
            check.name,
            if check.pass() { "PASS" } else { "FAIL" },
            check.error,
            check.tolerance
        );
    }
    j.push("checks", JVal::Arr(items));
    j.push("pass", JVal::Bool(all_pass));
    std::fs::write(out.join("oracle.json"), j.to_json_string())?;
    print!("{lines}");
    Ok(if all_pass { EXIT_OK } else { EXIT_ORACLE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_every_namespace() {
        let text = "\
# full configuration
mode = solve
grid.dim = 2
grid.half_width = 3.5
grid.nodes = 33
mfg.gamma = 1.8          # comment after value
mfg.alpha = 0.7
mfg.mass = 2.0
mfg.damping = 0.4
mfg.tol = 1e-5
mfg.max_outer = 50
mfg.p_bar = 4.0
mfg.mollifier_orders = 4, 8, 16
mfg.decoupled = true
potential.kind = power
potential.coeff = 0.5
potential.exponent = 4.0
out.dir = results
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Mode::Solve);
        assert_eq!(cfg.params.grid.dim(), 2);
        assert_eq!(cfg.params.grid.nodes_per_axis(), 33);
        assert_eq!(cfg.params.gamma, 1.8);
        assert_eq!(cfg.params.mollifier_orders, vec![4.0, 8.0, 16.0]);
        assert!(cfg.params.decoupled);
        assert_eq!(
            cfg.params.potential,
            Potential::Power {
                coeff: 0.5,
                exponent: 4.0
            }
        );
        assert_eq!(cfg.out_dir, PathBuf::from("results"));
        assert!(cfg.sweep.is_none());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse("mode = oracle\n").unwrap();
        assert_eq!(cfg.mode, Mode::Oracle);
        assert_eq!(cfg.params.grid.dim(), 1);
        assert_eq!(cfg.params.gamma, 2.0);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn strict_parsing_rejects_bad_input() {
        let unknown = RunConfig::parse("mode = solve\nmfg.gama = 2.0\n").unwrap_err();
        assert!(unknown.to_string().contains("mfg.gama"), "{unknown}");
        let dup = RunConfig::parse("mode = solve\nmfg.mass = 1\nmfg.mass = 2\n").unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");
        assert!(RunConfig::parse("mode = dance\n").is_err());
        assert!(RunConfig::parse("grid.dim = 1\n").is_err(), "mode required");
        let noeq = RunConfig::parse("mode solve\n").unwrap_err();
        assert!(noeq.to_string().contains("key = value"), "{noeq}");
        // validation failures name the violated bound
        let bad_alpha = RunConfig::parse("mode = solve\nmfg.alpha = 1.5\n").unwrap_err();
        assert!(bad_alpha.to_string().contains("(0, 1)"), "{bad_alpha}");
    }

    #[test]
    fn mode_specific_requirements_enforced() {
        assert!(
            RunConfig::parse("mode = sweep\n")
                .unwrap_err()
                .to_string()
                .contains("sweep.parameter")
        );
        let cfg = RunConfig::parse(
            "mode = sweep\nsweep.parameter = mass\nsweep.values = 0.5, 1.0, 1.5\n",
        )
        .unwrap();
        let axis = cfg.sweep.unwrap();
        assert_eq!(axis.parameter, SweepParameter::Mass);
        assert_eq!(axis.values, vec![0.5, 1.0, 1.5]);

        assert!(
            RunConfig::parse("mode = verify\n")
                .unwrap_err()
                .to_string()
                .contains("verify.bundle")
        );
        assert!(
            RunConfig::parse("mode = nonexist-probe\npotential.kind = power\n").is_err()
        );
        // zero potential with stray power keys is rejected
        assert!(RunConfig::parse("mode = solve\npotential.coeff = 1.0\n").is_err());
    }

    #[test]
    fn solve_mode_writes_deterministic_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "mode = solve\ngrid.nodes = 65\nmfg.tol = 1e-5\npotential.kind = power\n\
             potential.coeff = 1.0\npotential.exponent = 2.0\nout.dir = {}\n",
            dir.path().join("a").display()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(run(&cfg, 1), EXIT_OK);
        let report_a = std::fs::read(dir.path().join("a/report.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
        assert_eq!(parsed["converged"], true);
        assert!(parsed["diagnostics"]["id47"].is_number());
        assert!(dir.path().join("a/u.csv").exists());
        assert!(dir.path().join("a/m.csv").exists());

        // identical config, different directory: byte-identical report
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir.path().join("b");
        assert_eq!(run(&cfg2, 1), EXIT_OK);
        let report_b = std::fs::read(dir.path().join("b/report.json")).unwrap();
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn failed_solve_exits_3_with_trace_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "mode = solve\ngrid.nodes = 65\nmfg.concentration_ceiling = 1e-6\n\
             potential.kind = power\npotential.coeff = 1.0\npotential.exponent = 2.0\n\
             out.dir = {}\n",
            dir.path().display()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(run(&cfg, 1), EXIT_SOLVER);
        let rep: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(rep["converged"], false);
        assert_eq!(rep["error_kind"], "concentration");
        assert!(!rep["trace"].as_array().unwrap().is_empty());
    }

    #[test]
    fn verify_accepts_fresh_bundle_and_flags_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = dir.path().join("bundle");
        let text = format!(
            "mode = solve\ngrid.nodes = 65\nmfg.tol = 1e-5\npotential.kind = power\n\
             potential.coeff = 1.0\npotential.exponent = 2.0\nout.dir = {}\n",
            bundle.display()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(run(&cfg, 1), EXIT_OK);

        let verify_text = format!(
            "mode = verify\nverify.bundle = {}\nout.dir = {}\n",
            bundle.display(),
            dir.path().join("check").display()
        );
        let vcfg = RunConfig::parse(&verify_text).unwrap();
        assert_eq!(run(&vcfg, 1), EXIT_OK);
        let verdict: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("check/verify.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(verdict["pass"], true);

        // perturb the density file: drift must be flagged
        let m_path = bundle.join("m.csv");
        let mut lines: Vec<String> =
            std::fs::read_to_string(&m_path).unwrap().lines().map(String::from).collect();
        let mid = lines.len() / 2;
        let (coord, _val) = lines[mid].rsplit_once(',').map(|(a, b)| (a.to_string(), b)).unwrap();
        lines[mid] = format!("{coord},1.0e0");
        std::fs::write(&m_path, lines.join("\n") + "\n").unwrap();
        assert_eq!(run(&vcfg, 1), EXIT_SOLVER);
    }

    #[test]
    fn probe_mode_completes_on_failure_and_reports_certificate() {
        let dir = tempfile::tempdir().unwrap();
        // V = 0 with a tiny ceiling forces a concentration failure fast;
        // alpha = 0.5 in 1d is subcritical, so the certificate reports the
        // obstruction as not applicable rather than a sign conflict
        let text = format!(
            "mode = nonexist-probe\ngrid.nodes = 65\nmfg.alpha = 0.5\n\
             mfg.concentration_ceiling = 1e-6\nout.dir = {}\n",
            dir.path().display()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(run(&cfg, 1), EXIT_OK);
        let rep: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(rep["converged"], false);
        assert_eq!(rep["certificate"]["status"], "NotApplicable");
    }

    #[test]
    fn sweep_mode_emits_summary_and_bundles() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "mode = sweep\ngrid.nodes = 65\nmfg.tol = 1e-4\nmfg.decoupled = true\n\
             mfg.damping = 1.0\npotential.kind = power\npotential.coeff = 1.0\n\
             potential.exponent = 2.0\nsweep.parameter = mass\n\
             sweep.values = 0.5, 1.0, 2.0\nout.dir = {}\n",
            dir.path().display()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(run(&cfg, 2), EXIT_OK);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4, "{summary}");
        assert_eq!(summary.matches("true").count(), 3);
        for i in 0..3 {
            assert!(dir.path().join(format!("sweep_{i:03}/report.json")).exists());
        }
        // rows stay in axis order regardless of completion order
        let masses: Vec<&str> = summary
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(masses[0], "5.0000000000000000e-1");
        assert_eq!(masses[2], "2.0000000000000000e0");
    }
}
