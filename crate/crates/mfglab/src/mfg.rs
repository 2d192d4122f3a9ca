//! Damped fixed-point driver for the coupled stationary system.
//!
//! One outer iteration maps a candidate density mu through the pipeline
//!
//! ```text
//!   mu  ->  f = V - K * (phi_k * mu)   (aggregation, mollified)
//!       ->  (u, lambda)                (ergodic HJB solve, warm started)
//!       ->  m                          (invariant density for drift from u)
//! ```
//!
//! and relaxes `mu <- (1 - theta) mu + theta m`. The mollifier order k runs
//! through a continuation schedule; each level starts from the previous
//! level's state. The iteration is damped Picard on a map that theory
//! guarantees has a fixed point but need not contract, so stagnation and
//! concentration guards are part of the contract, and failures return the
//! full iteration trace for post-mortems.
//!
//! The module also hosts the bookkeeping that surrounds the solve: the
//! criticality regimes in the (alpha, gamma) plane, the feasibility radius
//! xi for the admissible set, the admissible-set membership check, and an
//! empirical mass-threshold estimator.

use std::fmt;

use crate::error::{MfgError, Result};
use crate::grid::{self, Grid, ScalarField, integrate_product, lp_norm};
use crate::hjb::{self, HjbParams};
use crate::kfp::{self, KfpParams, gamma_conjugate};
use crate::riesz::{Mollifier, RieszOperator};

/// Position of (alpha, gamma) relative to the two critical aggregation
/// strengths: the Hardy-Littlewood-Sobolev threshold N - 2 gamma' and the
/// mass threshold N - gamma'.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// alpha < N - 2 gamma': no classical solutions exist.
    HlsSupercritical,
    /// alpha = N - 2 gamma': borderline of the nonexistence range.
    HlsCritical,
    /// N - 2 gamma' < alpha < N - gamma': existence unresolved in general.
    MassSupercritical,
    /// alpha = N - gamma': existence for small mass only.
    MassCritical,
    /// alpha > N - gamma': existence for every mass.
    MassSubcritical,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::HlsSupercritical => "HLS-supercritical",
            Regime::HlsCritical => "HLS-critical",
            Regime::MassSupercritical => "mass-supercritical",
            Regime::MassCritical => "mass-critical",
            Regime::MassSubcritical => "mass-subcritical",
        }
    }

    /// Whether the existence theory backs a solve in this regime (always
    /// for subcritical, small mass for critical). The remaining regimes
    /// require an explicit probing override.
    pub fn existence_asserted(self) -> bool {
        matches!(self, Regime::MassSubcritical | Regime::MassCritical)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Classify (alpha, gamma) against the two critical thresholds. Equality
/// is decided at 1e-12 relative scale so exactly representable critical
/// parameters land on the boundary labels.
pub fn classify_regime(dim: usize, gamma: f64, alpha: f64) -> Result<Regime> {
    if !(gamma > 1.0) {
        return Err(MfgError::InvalidParameter(format!(
            "regime classification needs gamma > 1, got {gamma}"
        )));
    }
    let n = dim as f64;
    if !(alpha > 0.0 && alpha < n) {
        return Err(MfgError::InvalidParameter(format!(
            "regime classification needs alpha in (0, {n}), got {alpha}"
        )));
    }
    let gc = gamma_conjugate(gamma);
    let hls = n - 2.0 * gc;
    let mass = n - gc;
    let tol = 1e-12 * (1.0 + alpha.abs() + gc.abs() + n);
    Ok(if (alpha - hls).abs() <= tol {
        Regime::HlsCritical
    } else if alpha < hls {
        Regime::HlsSupercritical
    } else if (alpha - mass).abs() <= tol {
        Regime::MassCritical
    } else if alpha < mass {
        Regime::MassSupercritical
    } else {
        Regime::MassSubcritical
    })
}

/// Outcome of the feasibility analysis for the admissible-set radius.
#[derive(Debug, Clone, Copy)]
pub struct XiSelection {
    /// Whether a radius exists for this mass.
    pub feasible: bool,
    /// The radius, when feasible.
    pub xi: Option<f64>,
    /// Mass threshold below which the selection is feasible, in the cases
    /// where it has a closed form.
    pub mass_threshold: Option<f64>,
    /// The case exponent a = 2 gamma' / (N - alpha).
    pub exponent: f64,
}

/// Select the admissible-set radius xi for mass `mass` and interpolation
/// constants `c1`, `c2`, following the case analysis on the exponent
/// a = 2 gamma'/(N - alpha): the radius must satisfy
/// xi^a >= c2 M^{a-1} xi^2 + c1 M^a.
///
/// - a > 2: feasible for every mass; xi is the positive crossing of
///   f(t) = t^a - c2 M^{a-1} t^2 - c1 M^a, found by bisection.
/// - a = 2: feasible iff M < 1/c2, with xi = M sqrt(c1 / (1 - c2 M)).
/// - 1 < a < 2: feasible iff f is nonnegative at its constrained maximizer
///   t_max = (a / (2 c2 M^{a-1}))^{1/(2-a)}; xi = t_max.
/// - a = 1: feasible iff M <= 1/(4 c1 c2), with the explicit quadratic root.
/// - a < 1: the nonexistence side; never feasible.
pub fn xi_selection(
    dim: usize,
    gamma: f64,
    alpha: f64,
    mass: f64,
    c1: f64,
    c2: f64,
) -> Result<XiSelection> {
    let n = dim as f64;
    if !(gamma > 1.0) || !(alpha > 0.0 && alpha < n) {
        return Err(MfgError::InvalidParameter(format!(
            "xi selection needs gamma > 1 and alpha in (0, {n}); got gamma={gamma}, alpha={alpha}"
        )));
    }
    if !(mass > 0.0 && c1 > 0.0 && c2 > 0.0) {
        return Err(MfgError::InvalidParameter(format!(
            "xi selection needs positive mass and constants; got M={mass}, c1={c1}, c2={c2}"
        )));
    }
    let gc = gamma_conjugate(gamma);
    let a = 2.0 * gc / (n - alpha);
    let tol = 1e-12 * (1.0 + a);
    let f = |t: f64| t.powf(a) - c2 * mass.powf(a - 1.0) * t * t - c1 * mass.powf(a);

    if (a - 2.0).abs() <= tol {
        let threshold = 1.0 / c2;
        if mass < threshold {
            let xi = mass * (c1 / (1.0 - c2 * mass)).sqrt();
            return Ok(XiSelection {
                feasible: true,
                xi: Some(xi),
                mass_threshold: Some(threshold),
                exponent: a,
            });
        }
        return Ok(XiSelection {
            feasible: false,
            xi: None,
            mass_threshold: Some(threshold),
            exponent: a,
        });
    }
    if a > 2.0 {
        // single positive crossing: expand a bracket, then bisect
        let mut hi = 1.0f64;
        let mut guard = 0;
        while f(hi) <= 0.0 {
            hi *= 2.0;
            guard += 1;
            if guard > 600 {
                return Err(MfgError::InvalidParameter(
                    "xi bisection bracket expansion ran away".into(),
                ));
            }
        }
        let mut lo = 0.0f64;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        return Ok(XiSelection {
            feasible: true,
            xi: Some(hi),
            mass_threshold: None,
            exponent: a,
        });
    }
    if (a - 1.0).abs() <= tol {
        let threshold = 1.0 / (4.0 * c1 * c2);
        if mass <= threshold {
            let xi = (1.0 - (1.0 - 4.0 * c1 * c2 * mass).sqrt()) / (2.0 * c2);
            return Ok(XiSelection {
                feasible: true,
                xi: Some(xi),
                mass_threshold: Some(threshold),
                exponent: a,
            });
        }
        return Ok(XiSelection {
            feasible: false,
            xi: None,
            mass_threshold: Some(threshold),
            exponent: a,
        });
    }
    if a > 1.0 {
        // 1 < a < 2: feasible only while the hump of f stays nonnegative
        let t_max = (a / (2.0 * c2 * mass.powf(a - 1.0))).powf(1.0 / (2.0 - a));
        if f(t_max) >= 0.0 {
            return Ok(XiSelection {
                feasible: true,
                xi: Some(t_max),
                mass_threshold: None,
                exponent: a,
            });
        }
        return Ok(XiSelection {
            feasible: false,
            xi: None,
            mass_threshold: None,
            exponent: a,
        });
    }
    Ok(XiSelection {
        feasible: false,
        xi: None,
        mass_threshold: None,
        exponent: a,
    })
}

/// Parameters of the admissible set: Lp-norm radius, mass tolerance,
/// potential-moment cap, and the norm exponent used for self-consistency.
#[derive(Debug, Clone, Copy)]
pub struct AdmissibleSetParams {
    /// Radius bound on the L^{2N/(N+alpha)} norm.
    pub xi: f64,
    /// Allowed deviation of the integral from the target mass.
    pub mass_tol: f64,
    /// Cap on the potential moment integral mu V.
    pub potential_cap: f64,
    /// Exponent of the self-consistency norm; must exceed N/alpha.
    pub p_bar: f64,
}

/// Signed membership margins for the admissible set; every margin is
/// nonnegative exactly when the corresponding constraint holds.
#[derive(Debug, Clone, Copy)]
pub struct AdmissibleReport {
    pub inside: bool,
    /// xi minus the L^{2N/(N+alpha)} norm.
    pub norm_margin: f64,
    /// mass_tol minus |integral mu - M|.
    pub mass_margin: f64,
    /// Minimum node value of mu.
    pub positivity_margin: f64,
    /// potential_cap minus integral mu V.
    pub potential_margin: f64,
}

/// Check membership of `mu` in the admissible set and report the four
/// signed margins. A missing potential contributes zero moment.
pub fn admissible_set_check(
    mu: &ScalarField,
    params: &AdmissibleSetParams,
    mass: f64,
    potential: Option<&ScalarField>,
    alpha: f64,
) -> AdmissibleReport {
    let n = mu.grid.dim() as f64;
    let p = 2.0 * n / (n + alpha);
    let norm = lp_norm(mu, p);
    let norm_margin = params.xi - norm;
    let mass_margin = params.mass_tol - (grid::integrate(mu) - mass).abs();
    let positivity_margin = mu.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let moment = potential.map_or(0.0, |v| integrate_product(mu, v));
    let potential_margin = params.potential_cap - moment;
    AdmissibleReport {
        inside: norm_margin >= 0.0
            && mass_margin >= 0.0
            && positivity_margin >= 0.0
            && potential_margin >= 0.0,
        norm_margin,
        mass_margin,
        positivity_margin,
        potential_margin,
    }
}

/// Confining potential: either absent or a positive power of the radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Potential {
    Zero,
    Power { coeff: f64, exponent: f64 },
}

impl Potential {
    pub fn is_zero(self) -> bool {
        matches!(self, Potential::Zero)
    }

    pub fn validate(self) -> Result<()> {
        if let Potential::Power { coeff, exponent } = self {
            if !(coeff > 0.0) || !(exponent >= 0.0) {
                return Err(MfgError::InvalidParameter(format!(
                    "power potential needs coeff > 0 and exponent >= 0, got {coeff}, {exponent}"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(self, grid: Grid) -> ScalarField {
        match self {
            Potential::Zero => ScalarField::zeros(grid),
            Potential::Power { coeff, exponent } => {
                let mut out = ScalarField::zeros(grid);
                for i in 0..grid.node_count() {
                    out.values[i] = coeff * grid.radius(i).powf(exponent);
                }
                out
            }
        }
    }
}

impl fmt::Display for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Zero => write!(f, "0"),
            Potential::Power { coeff, exponent } => write!(f, "{coeff} |x|^{exponent}"),
        }
    }
}

/// Everything a fixed-point solve needs. `new` fills in the defaults used
/// throughout; the public fields are meant to be adjusted directly.
#[derive(Debug, Clone)]
pub struct MfgParams {
    pub grid: Grid,
    pub gamma: f64,
    pub alpha: f64,
    pub mass: f64,
    pub potential: Potential,
    /// Picard damping factor in (0, 1].
    pub damping: f64,
    /// Strictly increasing mollifier continuation orders.
    pub mollifier_orders: Vec<f64>,
    /// Self-consistency tolerance in the L^{p_bar} norm.
    pub tol: f64,
    /// Iteration cap per mollifier level.
    pub max_outer: usize,
    /// Self-consistency norm exponent; defaults to N/alpha + 1.
    pub p_bar: Option<f64>,
    /// Sup-norm ceiling for the density before the run is declared
    /// concentrating; defaults to half the one-node spike M/h^N, which no
    /// smooth density reaches but any collapse must cross.
    pub concentration_ceiling: Option<f64>,
    /// Interpolation constants for the xi selection.
    pub c1: f64,
    pub c2: f64,
    /// Cap for the admissible potential moment; defaults to ten times the
    /// initial iterate's moment.
    pub potential_cap: Option<f64>,
    /// Allow solving in regimes without existence backing.
    pub probe_override: bool,
    /// Drop the aggregation term entirely (oracle mode: the pipeline then
    /// converges to the decoupled closed forms).
    pub decoupled: bool,
}

impl MfgParams {
    pub fn new(grid: Grid, gamma: f64, alpha: f64, mass: f64) -> MfgParams {
        MfgParams {
            grid,
            gamma,
            alpha,
            mass,
            potential: Potential::Zero,
            damping: 0.5,
            mollifier_orders: vec![4.0, 8.0, 16.0, 32.0],
            tol: 1e-6,
            max_outer: 400,
            p_bar: None,
            concentration_ceiling: None,
            c1: 1.0,
            c2: 1.0,
            potential_cap: None,
            probe_override: false,
            decoupled: false,
        }
    }

    pub fn p_bar_value(&self) -> f64 {
        self.p_bar
            .unwrap_or(self.grid.dim() as f64 / self.alpha + 1.0)
    }

    pub fn ceiling_value(&self) -> f64 {
        self.concentration_ceiling.unwrap_or_else(|| {
            let h = self.grid.spacing();
            0.5 * self.mass / h.powi(self.grid.dim() as i32)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.dim() as f64;
        if !(self.gamma > 1.0) {
            return Err(MfgError::InvalidParameter(format!(
                "gamma must exceed 1, got {}",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < n) {
            return Err(MfgError::InvalidParameter(format!(
                "alpha must lie in (0, {n}), got {}",
                self.alpha
            )));
        }
        if !(self.mass > 0.0) {
            return Err(MfgError::InvalidParameter(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(MfgError::InvalidParameter(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.mollifier_orders.is_empty() {
            return Err(MfgError::InvalidParameter(
                "mollifier schedule must not be empty".into(),
            ));
        }
        if self.mollifier_orders.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MfgError::InvalidParameter(
                "mollifier schedule must be strictly increasing".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(MfgError::InvalidParameter(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        let p_bar = self.p_bar_value();
        if !(p_bar > n / self.alpha) {
            return Err(MfgError::InvalidParameter(format!(
                "p_bar must exceed N/alpha = {}, got {p_bar}",
                n / self.alpha
            )));
        }
        self.potential.validate()
    }
}

/// One outer-iteration record. Failures return the trace alongside the
/// error so aborted runs can still be inspected.
#[derive(Debug, Clone)]
pub struct MfgTraceEntry {
    pub mollifier_order: f64,
    /// Global iteration index (1-based, across levels).
    pub iteration: usize,
    /// L^{p_bar} norm of the damped update.
    pub update_norm: f64,
    pub lambda: f64,
    /// Value of the energy functional at (u_j, m_j).
    pub energy: f64,
    pub mass_leak: f64,
    pub density_sup: f64,
    /// Aggregation pairing of this iteration, integral of m (K * phi * mu);
    /// feeds the sign certificate when a probe run aborts.
    pub interaction: f64,
    /// lambda_j minus the Gaussian upper bound (nonpositive when the
    /// monitor holds).
    pub lambda_bound_gap: f64,
    pub admissible: AdmissibleReport,
}

/// Converged output of the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    /// Anchored value function from the final iteration.
    pub u: ScalarField,
    /// Invariant density of the final iteration (exact mass, nonnegative).
    pub m: ScalarField,
    pub lambda: f64,
    /// Nodal kinetic energy integral m |grad u|^gamma.
    pub kinetic_energy: f64,
    /// Final L^{p_bar} update norm.
    pub self_consistency: f64,
    /// Normalized residual of the energy-balance identity
    /// (1/gamma') E_kin + integral m V = lambda M + integral m (K*phi*m).
    pub energy_balance: f64,
    /// Gaussian upper bound for lambda used by the monitor.
    pub lambda_bound: f64,
    pub regime: Regime,
    pub trace: Vec<MfgTraceEntry>,
    pub outer_iterations: usize,
}

/// Error plus the iteration trace accumulated before the failure.
#[derive(Debug)]
pub struct SolveFailure {
    pub error: MfgError,
    pub trace: Vec<MfgTraceEntry>,
}

impl fmt::Display for SolveFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for SolveFailure {}

impl From<SolveFailure> for MfgError {
    fn from(f: SolveFailure) -> MfgError {
        f.error
    }
}

fn gaussian_iterate(grid: Grid, mass: f64) -> ScalarField {
    let sigma = grid.half_width() / 6.0;
    let mut mu = ScalarField::zeros(grid);
    for i in 0..grid.node_count() {
        let r = grid.radius(i);
        mu.values[i] = (-0.5 * r * r / (sigma * sigma)).exp();
    }
    let total = grid::integrate(&mu);
    mu.values.iter_mut().for_each(|v| *v *= mass / total);
    mu
}

/// Run the damped fixed-point iteration with mollifier continuation.
///
/// The regime gate refuses parameter sets without existence backing unless
/// `probe_override` is set. On success the solution carries the full trace;
/// on failure the trace travels with the error.
pub fn fixed_point_solve(params: &MfgParams) -> std::result::Result<MfgSolution, SolveFailure> {
    let fail = |error: MfgError| SolveFailure {
        error,
        trace: Vec::new(),
    };
    params.validate().map_err(fail)?;
    let g = params.grid;
    let regime = classify_regime(g.dim(), params.gamma, params.alpha).map_err(fail)?;
    if !regime.existence_asserted() && !params.probe_override {
        return Err(fail(MfgError::RegimeNotSupported(format!(
            "{regime} (alpha = {}, gamma' = {}): set the probe override to run anyway",
            params.alpha,
            gamma_conjugate(params.gamma)
        ))));
    }

    let vfield = params.potential.eval(g);
    let potential_ref = (!params.potential.is_zero()).then_some(&vfield);
    let riesz = if params.decoupled {
        None
    } else {
        Some(RieszOperator::new(g, params.alpha).map_err(fail)?)
    };
    let lambda_bound = hjb::lambda_upper_bound(&vfield, params.gamma);
    let gc = gamma_conjugate(params.gamma);
    let p_bar = params.p_bar_value();
    let ceiling = params.ceiling_value();
    let hjb_params = HjbParams::new(params.gamma);
    let kfp_params = KfpParams::new(params.gamma, params.mass);

    let mut mu = gaussian_iterate(g, params.mass);
    let xi = xi_selection(
        g.dim(),
        params.gamma,
        params.alpha,
        params.mass,
        params.c1,
        params.c2,
    )
    .map_err(fail)?
    .xi
    .unwrap_or(f64::INFINITY);
    let potential_cap = params.potential_cap.unwrap_or_else(|| {
        10.0 * (1.0 + potential_ref.map_or(0.0, |v| integrate_product(&mu, v)))
    });
    let admissible_params = AdmissibleSetParams {
        xi,
        mass_tol: 1e-8 * (1.0 + params.mass),
        potential_cap,
        p_bar,
    };

    let mut trace: Vec<MfgTraceEntry> = Vec::new();
    let mut warm: Option<(ScalarField, f64)> = None;
    let mut global_iter = 0usize;
    // state of the final accepted iteration
    let mut last: Option<(ScalarField, f64, ScalarField, Option<ScalarField>, f64)> = None;

    for &order in &params.mollifier_orders {
        let mollifier = match Mollifier::new(g, order) {
            Ok(m) => m,
            Err(e) => {
                return Err(SolveFailure {
                    error: e,
                    trace,
                });
            }
        };
        let mut level_converged = false;
        let mut level_update = f64::INFINITY;

        for _ in 0..params.max_outer {
            global_iter += 1;
            let coupling = riesz.as_ref().map(|r| r.convolve(&mollifier.apply(&mu)));
            let mut f = vfield.clone();
            if let Some(c) = &coupling {
                f.values
                    .iter_mut()
                    .zip(&c.values)
                    .for_each(|(fi, ci)| *fi -= ci);
            }
            let hsol = match hjb::solve_ergodic(
                &f,
                &hjb_params,
                warm.as_ref().map(|(u, l)| (u, *l)),
            ) {
                Ok(s) => s,
                Err(e) => return Err(SolveFailure { error: e, trace }),
            };
            let ksol = match kfp::solve_stationary(&hsol.u, &kfp_params) {
                Ok(s) => s,
                Err(e) => return Err(SolveFailure { error: e, trace }),
            };
            let m = ksol.m;

            // damped Picard update and its self-consistency norm
            let mut next = mu.clone();
            next.values
                .iter_mut()
                .zip(&m.values)
                .for_each(|(nv, mv)| *nv = (1.0 - params.damping) * *nv + params.damping * mv);
            let diff = ScalarField::from_values(
                g,
                next.values
                    .iter()
                    .zip(&mu.values)
                    .map(|(a, b)| a - b)
                    .collect(),
            )
            .expect("difference field lives on the iteration grid");
            let update = lp_norm(&diff, p_bar);

            // monitors for the trace
            let kinetic = kfp::kinetic_energy_nodal(&hsol.u, &m, params.gamma);
            let pot_moment = potential_ref.map_or(0.0, |v| integrate_product(v, &m));
            let interaction = coupling
                .as_ref()
                .map_or(0.0, |c| integrate_product(c, &m));
            let energy = kinetic / gc + pot_moment - 0.5 * interaction;
            let density_sup = lp_norm(&m, f64::INFINITY);
            let admissible =
                admissible_set_check(&mu, &admissible_params, params.mass, potential_ref, params.alpha);
            trace.push(MfgTraceEntry {
                mollifier_order: order,
                iteration: global_iter,
                update_norm: update,
                lambda: hsol.lambda,
                energy,
                mass_leak: kfp::mass_leak_fraction(&m),
                density_sup,
                interaction,
                lambda_bound_gap: hsol.lambda - lambda_bound,
                admissible,
            });

            if density_sup > ceiling {
                return Err(SolveFailure {
                    error: MfgError::Concentration {
                        linf: density_sup,
                        ceiling,
                    },
                    trace,
                });
            }

            warm = Some((hsol.u.clone(), hsol.lambda));
            last = Some((hsol.u, hsol.lambda, m, coupling, update));
            mu = next;
            level_update = update;
            if update <= params.tol {
                level_converged = true;
                break;
            }
        }
        if !level_converged {
            return Err(SolveFailure {
                error: MfgError::Stagnation {
                    level: order.round() as u32,
                    update: level_update,
                },
                trace,
            });
        }
    }

    let (u, lambda, m, coupling, update) =
        last.expect("schedule is non-empty, so at least one iteration ran");
    if let Err(e) = kfp::verify_simple_kernel(&u, &kfp_params) {
        return Err(SolveFailure { error: e, trace });
    }

    let kinetic = kfp::kinetic_energy_nodal(&u, &m, params.gamma);
    let pot_moment = potential_ref.map_or(0.0, |v| integrate_product(v, &m));
    let interaction = coupling.as_ref().map_or(0.0, |c| integrate_product(c, &m));
    let energy_balance = (kinetic / gc + pot_moment - lambda * params.mass - interaction).abs()
        / (1.0 + lambda.abs() * params.mass);

    Ok(MfgSolution {
        u,
        m,
        lambda,
        kinetic_energy: kinetic,
        self_consistency: update,
        energy_balance,
        lambda_bound,
        regime,
        trace,
        outer_iterations: global_iter,
    })
}

/// Bracket for the empirical mass threshold between convergence and
/// failure.
#[derive(Debug, Clone, Copy)]
pub struct MassThreshold {
    /// Largest probed mass that converged.
    pub last_convergent: f64,
    /// Smallest probed mass that failed.
    pub first_divergent: f64,
}

/// Estimate the critical mass by bisection on solve outcome. `mass_lo`
/// must converge and `mass_hi` must fail (checked); the bracket shrinks
/// by half `steps` times. The returned bracket is an empirical statement
/// about this discretization, not a claim about the continuum threshold.
pub fn empirical_mass_threshold(
    base: &MfgParams,
    mass_lo: f64,
    mass_hi: f64,
    steps: usize,
) -> Result<MassThreshold> {
    if !(mass_lo > 0.0 && mass_hi > mass_lo) {
        return Err(MfgError::InvalidParameter(format!(
            "mass bracket must satisfy 0 < lo < hi, got [{mass_lo}, {mass_hi}]"
        )));
    }
    let run = |mass: f64| -> bool {
        let mut p = base.clone();
        p.mass = mass;
        fixed_point_solve(&p).is_ok()
    };
    if !run(mass_lo) {
        return Err(MfgError::InvalidParameter(format!(
            "mass bracket: lower end {mass_lo} does not converge"
        )));
    }
    if run(mass_hi) {
        return Err(MfgError::InvalidParameter(format!(
            "mass bracket: upper end {mass_hi} converges; nothing to bisect"
        )));
    }
    let mut lo = mass_lo;
    let mut hi = mass_hi;
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if run(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MassThreshold {
        last_convergent: lo,
        first_divergent: hi,
    })
}
