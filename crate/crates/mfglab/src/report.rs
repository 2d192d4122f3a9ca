//! Deterministic serialization of solve bundles.
//!
//! Reports are JSON with a fixed key order and every float printed at 17
//! significant digits, so byte-identical inputs produce byte-identical
//! files. The stock serializers print floats at shortest-roundtrip length,
//! which is reproducible but hides agreement between runs that differ in
//! the last bits, so the writer here formats explicitly; reading back goes
//! through `serde_json` since order no longer matters at that point.
//!
//! Scalar fields travel as CSV with one node per row in grid order, which
//! keeps them loadable by anything and diffable by eye.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::choquard::ChoquardSolution;
use crate::diagnostics::{Certificate, DiagnosticsReport};
use crate::error::{MfgError, Result};
use crate::grid::{Grid, ScalarField};
use crate::mfg::{MfgParams, MfgSolution, MfgTraceEntry, Potential, SolveFailure};

/// JSON value with insertion-ordered objects.
#[derive(Debug, Clone, PartialEq)]
pub enum JVal {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<JVal>),
    Obj(Vec<(String, JVal)>),
}

impl JVal {
    pub fn obj() -> JVal {
        JVal::Obj(Vec::new())
    }

    /// Append a key; panics on duplicates, which are always writer bugs.
    pub fn push(&mut self, key: &str, value: JVal) -> &mut JVal {
        match self {
            JVal::Obj(entries) => {
                assert!(
                    entries.iter().all(|(k, _)| k != key),
                    "duplicate report key {key}"
                );
                entries.push((key.to_string(), value));
            }
            _ => panic!("push on non-object report node"),
        }
        self
    }

    pub fn to_json_string(&self) -> String {
        let mut out = String::new();
        write_value(self, 0, &mut out);
        out.push('\n');
        out
    }
}

/// 17 significant digits; non-finite values become null since JSON has no
/// spelling for them.
fn write_float(x: f64, out: &mut String) {
    if x.is_finite() {
        let _ = write!(out, "{x:.16e}");
    } else {
        out.push_str("null");
    }
}

fn write_escaped(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn write_value(v: &JVal, depth: usize, out: &mut String) {
    match v {
        JVal::Null => out.push_str("null"),
        JVal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        JVal::Int(i) => {
            let _ = write!(out, "{i}");
        }
        JVal::Num(x) => write_float(*x, out),
        JVal::Str(s) => write_escaped(s, out),
        JVal::Arr(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                indent(depth + 1, out);
                write_value(item, depth + 1, out);
            }
            out.push('\n');
            indent(depth, out);
            out.push(']');
        }
        JVal::Obj(entries) => {
            if entries.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            for (i, (k, val)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                indent(depth + 1, out);
                write_escaped(k, out);
                out.push_str(": ");
                write_value(val, depth + 1, out);
            }
            out.push('\n');
            indent(depth, out);
            out.push('}');
        }
    }
}

fn indent(depth: usize, out: &mut String) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

/// CSV with one node per row in grid order: coordinate columns then the
/// value, all at 17 significant digits.
pub fn field_csv(f: &ScalarField) -> String {
    let g = f.grid;
    let mut out = String::new();
    for d in 0..g.dim() {
        let _ = write!(out, "x{d},");
    }
    out.push_str("value\n");
    for i in 0..g.node_count() {
        let p = g.position(i);
        for d in 0..g.dim() {
            let _ = write!(out, "{:.16e},", p[d]);
        }
        let _ = writeln!(out, "{:.16e}", f.values[i]);
    }
    out
}

pub fn write_field_csv(path: &Path, f: &ScalarField) -> Result<()> {
    std::fs::write(path, field_csv(f))?;
    Ok(())
}

/// Read a field CSV back onto the grid it was written from. Rows must be
/// complete and in grid order; the coordinate columns are checked against
/// the grid to catch mismatched geometry.
pub fn read_field_csv(path: &Path, grid: Grid) -> Result<ScalarField> {
    let text = std::fs::read_to_string(path)?;
    let mut values = Vec::with_capacity(grid.node_count());
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| MfgError::Config(format!("{}: empty field file", path.display())))?;
    let cols = header.split(',').count();
    if cols != grid.dim() + 1 {
        return Err(MfgError::Config(format!(
            "{}: {cols} columns, expected {} for a {}-d grid",
            path.display(),
            grid.dim() + 1,
            grid.dim()
        )));
    }
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != grid.dim() + 1 {
            return Err(MfgError::Config(format!(
                "{}: row {row} has {} fields",
                path.display(),
                fields.len()
            )));
        }
        if row >= grid.node_count() {
            return Err(MfgError::Config(format!(
                "{}: more rows than grid nodes ({})",
                path.display(),
                grid.node_count()
            )));
        }
        let pos = grid.position(row);
        for d in 0..grid.dim() {
            let x: f64 = fields[d]
                .parse()
                .map_err(|e| MfgError::Config(format!("{}: row {row}: {e}", path.display())))?;
            if (x - pos[d]).abs() > 1e-9 * (1.0 + pos[d].abs()) {
                return Err(MfgError::Config(format!(
                    "{}: row {row} coordinate {d} is {x}, grid says {}",
                    path.display(),
                    pos[d]
                )));
            }
        }
        let v: f64 = fields[grid.dim()]
            .parse()
            .map_err(|e| MfgError::Config(format!("{}: row {row}: {e}", path.display())))?;
        values.push(v);
    }
    ScalarField::from_values(grid, values)
}

fn grid_json(g: Grid) -> JVal {
    let mut j = JVal::obj();
    j.push("dim", JVal::Int(g.dim() as i64));
    j.push("points_per_axis", JVal::Int(g.nodes_per_axis() as i64));
    j.push("half_width", JVal::Num(g.half_width()));
    j
}

fn potential_json(p: Potential) -> JVal {
    let mut j = JVal::obj();
    match p {
        Potential::Zero => {
            j.push("kind", JVal::Str("zero".into()));
        }
        Potential::Power { coeff, exponent } => {
            j.push("kind", JVal::Str("power".into()));
            j.push("coeff", JVal::Num(coeff));
            j.push("exponent", JVal::Num(exponent));
        }
    }
    j
}

fn params_json(p: &MfgParams) -> JVal {
    let mut j = JVal::obj();
    j.push("grid", grid_json(p.grid));
    j.push("gamma", JVal::Num(p.gamma));
    j.push("alpha", JVal::Num(p.alpha));
    j.push("mass", JVal::Num(p.mass));
    j.push("potential", potential_json(p.potential));
    j.push("damping", JVal::Num(p.damping));
    j.push(
        "mollifier_orders",
        JVal::Arr(p.mollifier_orders.iter().map(|&o| JVal::Num(o)).collect()),
    );
    j.push("tol", JVal::Num(p.tol));
    j.push("max_outer", JVal::Int(p.max_outer as i64));
    j.push("p_bar", JVal::Num(p.p_bar_value()));
    j.push("concentration_ceiling", JVal::Num(p.ceiling_value()));
    j.push("probe_override", JVal::Bool(p.probe_override));
    j.push("decoupled", JVal::Bool(p.decoupled));
    j
}

fn trace_json(trace: &[MfgTraceEntry]) -> JVal {
    JVal::Arr(
        trace
            .iter()
            .map(|e| {
                let mut j = JVal::obj();
                j.push("mollifier_order", JVal::Num(e.mollifier_order));
                j.push("iteration", JVal::Int(e.iteration as i64));
                j.push("update_norm", JVal::Num(e.update_norm));
                j.push("lambda", JVal::Num(e.lambda));
                j.push("energy", JVal::Num(e.energy));
                j.push("mass_leak", JVal::Num(e.mass_leak));
                j.push("density_sup", JVal::Num(e.density_sup));
                j.push("interaction", JVal::Num(e.interaction));
                j.push("lambda_bound_gap", JVal::Num(e.lambda_bound_gap));
                let mut adm = JVal::obj();
                adm.push("inside", JVal::Bool(e.admissible.inside));
                adm.push("norm_margin", JVal::Num(e.admissible.norm_margin));
                adm.push("mass_margin", JVal::Num(e.admissible.mass_margin));
                adm.push(
                    "positivity_margin",
                    JVal::Num(e.admissible.positivity_margin),
                );
                adm.push(
                    "potential_margin",
                    JVal::Num(e.admissible.potential_margin),
                );
                j.push("admissible", adm);
                j
            })
            .collect(),
    )
}

fn certificate_json(c: &Certificate) -> JVal {
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

fn norms_json(norms: &BTreeMap<String, f64>) -> JVal {
    JVal::Obj(
        norms
            .iter()
            .map(|(k, &v)| (k.clone(), JVal::Num(v)))
            .collect(),
    )
}

/// Diagnostics section under its stable key names.
pub fn diagnostics_json(rep: &DiagnosticsReport) -> JVal {
    let mut j = JVal::obj();
    j.push("mass", JVal::Num(rep.mass));
    j.push("lambda", JVal::Num(rep.lambda));
    j.push(
        "pohozaev_residual",
        rep.pohozaev.map_or(JVal::Null, JVal::Num),
    );
    j.push("id47", JVal::Num(rep.identities.duality));
    j.push("id48", JVal::Num(rep.identities.tested));
    j.push("id20", JVal::Num(rep.identities.kinetic));
    let mut energy = JVal::obj();
    energy.push("value", JVal::Num(rep.energy.value));
    energy.push("infinite", JVal::Bool(rep.energy.infinite));
    j.push("energy", energy);
    j.push("certificate", certificate_json(&rep.certificate));
    j.push("mass_leak", JVal::Num(rep.mass_leak));
    j.push("kinetic_flux", JVal::Num(rep.kinetic_flux));
    j.push("kinetic_nodal", JVal::Num(rep.kinetic_nodal));
    j.push("interaction", JVal::Num(rep.interaction));
    j.push("potential_integral", JVal::Num(rep.potential_integral));
    j.push("norms", norms_json(&rep.norms));
    j
}

/// Full report for a converged solve; `diagnostics` is attached when the
/// caller ran it.
pub fn solve_report(
    params: &MfgParams,
    sol: &MfgSolution,
    diagnostics: Option<&DiagnosticsReport>,
) -> JVal {
    let mut j = JVal::obj();
    j.push("schema", JVal::Str("mfglab.solve/1".into()));
    j.push("converged", JVal::Bool(true));
    j.push("params", params_json(params));
    j.push("regime", JVal::Str(sol.regime.label().into()));
    j.push("lambda", JVal::Num(sol.lambda));
    j.push("lambda_bound", JVal::Num(sol.lambda_bound));
    j.push("kinetic_energy", JVal::Num(sol.kinetic_energy));
    j.push("self_consistency", JVal::Num(sol.self_consistency));
    j.push("energy_balance", JVal::Num(sol.energy_balance));
    j.push("outer_iterations", JVal::Int(sol.outer_iterations as i64));
    if let Some(d) = diagnostics {
        j.push("diagnostics", diagnostics_json(d));
    }
    j.push("trace", trace_json(&sol.trace));
    j
}

/// Report for a failed solve: the error string plus everything recorded
/// before the failure, same schema family as the success report.
pub fn failure_report(params: &MfgParams, failure: &SolveFailure) -> JVal {
    let mut j = JVal::obj();
    j.push("schema", JVal::Str("mfglab.solve/1".into()));
    j.push("converged", JVal::Bool(false));
    j.push("params", params_json(params));
    j.push("error", JVal::Str(failure.error.to_string()));
    j.push("error_kind", JVal::Str(error_kind(&failure.error).into()));
    j.push("trace", trace_json(&failure.trace));
    j
}

/// Stable machine-readable discriminant for failure reports.
pub fn error_kind(e: &MfgError) -> &'static str {
    match e {
        MfgError::InvalidParameter(_) => "invalid_parameter",
        MfgError::LinearSolve { .. } => "linear_solve",
        MfgError::HjbNoConvergence { .. } => "hjb_no_convergence",
        MfgError::NewtonStalled { .. } => "newton_stalled",
        MfgError::KernelNotSimple(_) => "kernel_not_simple",
        MfgError::Stagnation { .. } => "stagnation",
        MfgError::Concentration { .. } => "concentration",
        MfgError::SupercriticalCollapse { .. } => "supercritical_collapse",
        MfgError::FlowNoConvergence { .. } => "flow_no_convergence",
        MfgError::RegimeNotSupported(_) => "regime_not_supported",
        MfgError::Config(_) => "config",
        MfgError::Io(_) => "io",
    }
}

/// Report for the normalized-flow route (the `v.csv` bundle).
pub fn choquard_report(sol: &ChoquardSolution, grid: Grid) -> JVal {
    let mut j = JVal::obj();
    j.push("schema", JVal::Str("mfglab.choquard/1".into()));
    j.push("grid", grid_json(grid));
    j.push("lambda", JVal::Num(sol.lambda));
    j.push("mass", JVal::Num(sol.mass));
    j.push("flow_residual", JVal::Num(sol.flow_residual));
    j.push("iterations", JVal::Int(sol.iterations as i64));
    j.push("tau", JVal::Num(sol.tau));
    j.push(
        "energy_trace",
        JVal::Arr(sol.energy_trace.iter().map(|&e| JVal::Num(e)).collect()),
    );
    j
}

/// Header for the sweep summary table.
pub const SWEEP_HEADER: &str = "mass,alpha,gamma,points_per_axis,converged,lambda,kinetic_energy,\
self_consistency,energy_balance,error_kind,certificate\n";

/// One sweep summary row; `outcome` is the solve result for this grid
/// point, possibly a failure.
pub fn sweep_row(
    params: &MfgParams,
    outcome: &std::result::Result<MfgSolution, SolveFailure>,
) -> String {
    let mut row = String::new();
    let _ = write!(
        row,
        "{:.16e},{:.16e},{:.16e},{},",
        params.mass,
        params.alpha,
        params.gamma,
        params.grid.nodes_per_axis()
    );
    match outcome {
        Ok(sol) => {
            let certificate = match crate::diagnostics::nonexistence_certificate(
                params.grid.dim(),
                params.alpha,
                params.gamma,
                sol.lambda,
                sol.kinetic_energy.max(0.0),
                params.mass,
            ) {
                Certificate::SignConflict { .. } => "SignConflict",
                Certificate::NotApplicable { .. } => "NotApplicable",
                Certificate::Consistent { .. } => "Consistent",
            };
            let _ = writeln!(
                row,
                "true,{:.16e},{:.16e},{:.16e},{:.16e},,{certificate}",
                sol.lambda, sol.kinetic_energy, sol.self_consistency, sol.energy_balance
            );
        }
        Err(failure) => {
            let _ = writeln!(row, "false,,,,,{},", error_kind(&failure.error));
        }
    }
    row
}

/// Parse a report written by this module (or any JSON) for verification.
pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| MfgError::Config(format!("{}: {e}", path.display())))
}
