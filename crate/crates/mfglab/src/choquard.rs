//! Independent route to the quadratic-Hamiltonian stationary state.
//!
//! For a quadratic Hamiltonian the coupled system collapses, via the
//! substitution v = e^{-u/2}, m = v^2, into a single nonlinear eigenvalue
//! problem with a focusing nonlocal term:
//!
//! ```text
//!   -2 dv + (V - lambda) v = (K * v^2) v,     integral v^2 = M,  v > 0.
//! ```
//!
//! This module solves that problem directly by a normalized imaginary-time
//! flow that shares no solver code with the HJB/Fokker-Planck pipeline, so
//! agreement between the two routes validates both.
//!
//! The flow is a semi-implicit splitting: the stiff linear part -2d + V is
//! treated implicitly while the nonlocal coefficient c = K * v^2 is frozen
//! at the current iterate, and the iterate is rescaled to the target mass
//! after every step. The frozen coefficient sits on the matrix diagonal
//! (together with a Rayleigh shift), i.e. each step solves
//!
//! ```text
//!   (I + tau (-2d + V - c - lambda_hat)) w = v,
//! ```
//!
//! because placing c on the right-hand side leaves the renormalized map
//! with a fixed point that is NOT an eigenpair: the explicit term gets
//! divided by the renormalization factor, an O(tau) bias that stalls the
//! residual. With the diagonal placement the fixed point solves the
//! eigenproblem exactly for any step size. The step size defaults to
//! 0.1 h^2; the energy
//!
//! ```text
//!   E(v) = integral 2|grad v|^2 + V v^2 - (1/2) (K * v^2) v^2
//! ```
//!
//! is monitored every step and the step size is halved if it ever rises
//! beyond slack, so a returned solution certifies a monotone energy trace.

use crate::error::{MfgError, Result};
use crate::grid::{self, ScalarField};
use crate::linalg::{self, Csr, CsrBuilder, Precond};
use crate::riesz::RieszOperator;

/// Lower clamp applied to u before exponentiating e^{-u/2}. Values this far
/// below the anchor signal a diverging transform, not a usable density.
const HOPF_COLE_CLAMP: f64 = -50.0;

/// Hopf-Cole transform of an anchored value function: v = e^{-u/2} rescaled
/// so that the squared mass is `mass`, together with the implied density
/// m = v^2. Entries of u below -50 are clamped (and logged) first.
pub fn hopf_cole(u: &ScalarField, mass: f64) -> (ScalarField, ScalarField) {
    let clamped = u.values.iter().filter(|&&x| x < HOPF_COLE_CLAMP).count();
    if clamped > 0 {
        log::warn!(
            "hopf_cole: clamped {clamped} node(s) below {HOPF_COLE_CLAMP}; \
             the transform is saturated there"
        );
    }
    let mut v = u.map(|x| (-x.max(HOPF_COLE_CLAMP) / 2.0).exp());
    let norm2 = grid::integrate_product(&v, &v);
    let scale = (mass / norm2).sqrt();
    v.values.iter_mut().for_each(|x| *x *= scale);
    let m_check = v.map(|x| x * x);
    (v, m_check)
}

/// Assemble the self-adjoint operator -diffusion * laplacian + diag(V) with
/// the mirror closure, as a sparse matrix. Exactly W-self-adjoint for the
/// trapezoid weights (the Green identity in `grid` is the quadratic form).
pub fn schrodinger_operator(potential: &ScalarField, diffusion: f64) -> Csr {
    let g = potential.grid;
    let n = g.nodes_per_axis();
    let h2 = g.spacing() * g.spacing();
    let count = g.node_count();
    let mut builder = CsrBuilder::with_capacity(count, count * (2 * g.dim() + 1));
    for i in 0..count {
        builder.add(i, i, potential.values[i]);
        let mi = g.multi_index(i);
        for d in 0..g.dim() {
            let stride = g.stride(d);
            builder.add(i, i, 2.0 * diffusion / h2);
            // mirror ghost folds the wall neighbor back inside
            let left = if mi[d] == 0 { i + stride } else { i - stride };
            let right = if mi[d] == n - 1 { i - stride } else { i + stride };
            builder.add(i, left, -diffusion / h2);
            builder.add(i, right, -diffusion / h2);
        }
    }
    builder.build()
}

/// Ground state of -2 laplacian + V by inverse power iteration, scaled so
/// integral v^2 = mass. This is the coupling-off oracle for the flow.
pub fn ground_state(potential: &ScalarField, mass: f64) -> Result<(f64, ScalarField)> {
    if mass <= 0.0 {
        return Err(MfgError::InvalidParameter(format!(
            "ground_state needs positive mass, got {mass}"
        )));
    }
    let g = potential.grid;
    let a = schrodinger_operator(potential, 2.0);
    let weights: Vec<f64> = (0..g.node_count()).map(|i| g.node_weight(i)).collect();
    let vmin = potential.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let (lambda, vec) = linalg::smallest_eigenpair(&a, &weights, vmin - 1.0, 1e-11, 500)?;
    let mut v = ScalarField::from_values(g, vec)?;
    let scale = mass.sqrt();
    v.values.iter_mut().for_each(|x| *x *= scale);
    Ok((lambda, v))
}

/// Knobs for the normalized imaginary-time flow.
#[derive(Debug, Clone)]
pub struct ChoquardParams {
    /// Target squared mass integral v^2.
    pub mass: f64,
    /// Relative projected-residual tolerance for convergence.
    pub tol: f64,
    /// Hard iteration cap.
    pub max_iters: usize,
    /// Step size; `None` selects the default 0.1 h^2.
    pub tau: Option<f64>,
    /// Pre-normalization norm growth factor that triggers the collapse error.
    pub norm_ceiling: f64,
}

impl ChoquardParams {
    pub fn new(mass: f64) -> ChoquardParams {
        ChoquardParams {
            mass,
            tol: 1e-8,
            max_iters: 2_000_000,
            tau: None,
            norm_ceiling: 1e6,
        }
    }
}

/// Converged state of the normalized flow.
#[derive(Debug, Clone)]
pub struct ChoquardSolution {
    /// Positive ground-state profile with integral v^2 = mass.
    pub v: ScalarField,
    /// Rayleigh multiplier at the final iterate.
    pub lambda: f64,
    /// Achieved squared mass (renormalized every step, equals mass to
    /// rounding).
    pub mass: f64,
    /// Relative W-norm of the projected eigen-residual at the final iterate.
    pub flow_residual: f64,
    /// Flow steps taken.
    pub iterations: usize,
    /// Energy samples along the flow (every step while short, then
    /// decimated); non-increasing up to 1e-10 relative slack.
    pub energy_trace: Vec<f64>,
    /// Step size actually used at the end (may be smaller than requested if
    /// the energy monitor forced halving).
    pub tau: f64,
}

struct FlowEnergy {
    total: f64,
    dirichlet: f64,
    potential: f64,
    interaction: f64,
}

fn flow_energy(
    v: &ScalarField,
    potential: &ScalarField,
    coupling: Option<&ScalarField>,
    vsq: &ScalarField,
) -> FlowEnergy {
    let dirichlet = 2.0 * grid::face_dirichlet_form(v, v);
    let pot = grid::integrate_product(potential, vsq);
    let inter = coupling.map_or(0.0, |c| grid::integrate_product(c, vsq));
    FlowEnergy {
        total: dirichlet + pot - 0.5 * inter,
        dirichlet,
        potential: pot,
        interaction: inter,
    }
}

/// Solve the normalized nonlocal eigenvalue problem by semi-implicit
/// imaginary-time flow. `riesz` carries the nonlocal kernel; pass `None` to
/// drop the coupling term (linear eigenproblem, used by the oracle tests).
///
/// Every step renormalizes to `params.mass`, so positivity and the mass
/// invariant hold at every iterate, and the energy trace is monitored for
/// monotonicity. Unbounded pre-normalization growth aborts with
/// [`MfgError::SupercriticalCollapse`].
pub fn solve_choquard_normalized(
    potential: &ScalarField,
    riesz: Option<&RieszOperator>,
    params: &ChoquardParams,
) -> Result<ChoquardSolution> {
    if params.mass <= 0.0 || !params.mass.is_finite() {
        return Err(MfgError::InvalidParameter(format!(
            "flow needs positive mass, got {}",
            params.mass
        )));
    }
    if let Some(r) = riesz {
        if r.grid() != potential.grid {
            return Err(MfgError::InvalidParameter(
                "riesz operator grid does not match the potential grid".into(),
            ));
        }
    }
    let g = potential.grid;
    let h = g.spacing();
    let mut tau = params.tau.unwrap_or(0.1 * h * h);
    if tau <= 0.0 {
        return Err(MfgError::InvalidParameter(format!(
            "flow step must be positive, got {tau}"
        )));
    }
    let tau_floor = tau * 2f64.powi(-40);

    let a = schrodinger_operator(potential, 2.0);

    // positive initializer with broad overlap: a box-scaled Gaussian bump
    let sigma = g.half_width() / 3.0;
    let mut v = ScalarField::from_fn(g, |x| {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        (-r2 / (2.0 * sigma * sigma)).exp()
    });
    renormalize(&mut v, params.mass);

    let vsq = v.map(|x| x * x);
    let mut coupling = riesz.map(|r| r.convolve(&vsq));
    let mut energy = flow_energy(&v, potential, coupling.as_ref(), &vsq);
    let mut trace = vec![energy.total];
    let mut lambda = rayleigh(&energy, params.mass);

    let count = g.node_count();
    let mut w = vec![0.0; count];
    let mut shift = vec![0.0; count];
    let mut residual = f64::INFINITY;
    let norm_ceiling2 = params.norm_ceiling * params.norm_ceiling * params.mass;

    for iter in 1..=params.max_iters {
        // step matrix I + tau (A - c - lambda_hat), frozen coefficients
        for (i, s) in shift.iter_mut().enumerate() {
            let c = coupling.as_ref().map_or(0.0, |c| c.values[i]);
            *s = 1.0 - tau * (c + lambda);
        }
        let mut matrix = a.scaled(tau);
        matrix.add_diagonal(&shift);
        let pre = match Precond::ilu(&matrix) {
            Ok(p) => p,
            Err(_) => {
                // factorization lost positivity; a smaller step restores it
                tau *= 0.5;
                if tau < tau_floor {
                    return Err(MfgError::Stagnation { level: 0, update: 0.0 });
                }
                continue;
            }
        };
        w.copy_from_slice(&v.values);
        linalg::bicgstab(&matrix, &v.values, &mut w, &pre, 1e-13, 400)?;

        let mut norm2 = 0.0;
        for (i, wi) in w.iter().enumerate() {
            norm2 += g.node_weight(i) * wi * wi;
        }
        if !norm2.is_finite() || norm2 > norm_ceiling2 {
            return Err(MfgError::SupercriticalCollapse {
                norm: norm2.sqrt(),
                ceiling: norm_ceiling2.sqrt(),
            });
        }

        let scale = (params.mass / norm2).sqrt();
        let candidate = ScalarField::from_values(g, w.iter().map(|x| x * scale).collect())?;
        let cand_sq = candidate.map(|x| x * x);
        let cand_coupling = riesz.map(|r| r.convolve(&cand_sq));
        let cand_energy = flow_energy(&candidate, potential, cand_coupling.as_ref(), &cand_sq);

        let slack = 1e-10 * (1.0 + energy.total.abs());
        if cand_energy.total > energy.total + slack {
            // energy rose: retry the same step with half the step size
            tau *= 0.5;
            if tau < tau_floor {
                return Err(MfgError::Stagnation {
                    level: 0,
                    update: cand_energy.total - energy.total,
                });
            }
            continue;
        }

        v = candidate;
        coupling = cand_coupling;
        energy = cand_energy;
        lambda = rayleigh(&energy, params.mass);
        if trace.len() < 512 || iter % 64 == 0 {
            trace.push(energy.total);
        }

        // the eigen-residual is the expensive check, run it sparsely
        if iter % 16 == 0 || iter == params.max_iters {
            residual = eigen_residual(&a, &v, coupling.as_ref(), lambda, params.mass);
            if residual <= params.tol {
                if *trace.last().unwrap() != energy.total {
                    trace.push(energy.total);
                }
                return Ok(ChoquardSolution {
                    v,
                    lambda,
                    mass: params.mass,
                    flow_residual: residual,
                    iterations: iter,
                    energy_trace: trace,
                    tau,
                });
            }
        }
    }
    Err(MfgError::FlowNoConvergence {
        residual,
        target: params.tol,
    })
}

fn renormalize(v: &mut ScalarField, mass: f64) {
    let norm2 = grid::integrate_product(v, v);
    let scale = (mass / norm2).sqrt();
    v.values.iter_mut().for_each(|x| *x *= scale);
}

fn rayleigh(energy: &FlowEnergy, mass: f64) -> f64 {
    // the eigenvalue pairs with the FULL interaction, the energy with half
    (energy.dirichlet + energy.potential - energy.interaction) / mass
}

fn eigen_residual(
    a: &Csr,
    v: &ScalarField,
    coupling: Option<&ScalarField>,
    lambda: f64,
    mass: f64,
) -> f64 {
    let g = v.grid;
    let mut av = vec![0.0; v.values.len()];
    a.matvec(&v.values, &mut av);
    let mut num = 0.0;
    for i in 0..v.values.len() {
        let c = coupling.map_or(0.0, |c| c.values[i]);
        let r = av[i] - c * v.values[i] - lambda * v.values[i];
        num += g.node_weight(i) * r * r;
    }
    (num / mass).sqrt() / (1.0 + lambda.abs())
}
