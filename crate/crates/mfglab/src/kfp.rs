//! Stationary Kolmogorov-Fokker-Planck solver for the density transported
//! by the optimal drift of the ergodic control problem:
//!
//! ```text
//!   -lap m - div(m |grad u|^{gamma-2} grad u) = 0,   integral m = M,  m >= 0
//! ```
//!
//! with zero-flux walls. The discretization is an exponentially fitted
//! finite-volume scheme: each face carries the Scharfetter-Gummel flux
//!
//! ```text
//!   J_f = (1/h) [ B(s) m_left - B(-s) m_right ],   s = h * g_f,
//! ```
//!
//! where B is the Bernoulli function and g_f the face drift. This keeps the
//! operator an M-matrix with a one-dimensional positive kernel, conserves
//! mass exactly, and for gamma = 2 (where the face drift is taken as the
//! potential increment) reproduces the Gibbs density exactly on the grid.
//!
//! Testing the equation against u and summing by parts over faces gives two
//! discrete pairings whose sum vanishes identically on the kernel: the
//! gradient pairing (consistent with the integral of grad u . grad m) and
//! the kinetic pairing (consistent with the integral of m |grad u|^gamma).

use crate::error::{MfgError, Result};
use crate::grid::{ScalarField, VectorField, gradient, integrate, lp_norm};
use crate::linalg::{Csr, CsrBuilder, Precond, bicgstab};
use crate::special::bernoulli;

/// Conjugate exponent gamma' = gamma / (gamma - 1).
pub fn gamma_conjugate(gamma: f64) -> f64 {
    gamma / (gamma - 1.0)
}

#[derive(Debug, Clone)]
pub struct KfpParams {
    /// Hamiltonian exponent of the driving potential (gamma > 1).
    pub gamma: f64,
    /// Prescribed total mass M > 0.
    pub mass: f64,
    /// Relative diagonal shift for the inverse-power kernel solve.
    pub shift: f64,
    /// Cap on inverse-power iterations.
    pub max_power_iters: usize,
    /// Target for the row-scaled kernel residual.
    pub tol: f64,
}

impl KfpParams {
    pub fn new(gamma: f64, mass: f64) -> KfpParams {
        KfpParams {
            gamma,
            mass,
            shift: 1e-10,
            max_power_iters: 8,
            tol: 1e-12,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(MfgError::InvalidParameter(format!(
                "drift exponent must satisfy gamma > 1, got {}",
                self.gamma
            )));
        }
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return Err(MfgError::InvalidParameter(format!(
                "total mass must be positive, got {}",
                self.mass
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KfpSolution {
    /// Stationary density, nonnegative with exact prescribed mass.
    pub m: ScalarField,
    /// Row-scaled kernel residual ||K m||_inf / ||m||_inf at return.
    pub kernel_residual: f64,
    /// Inverse-power iterations used.
    pub power_iterations: usize,
    /// Mass removed by clamping stray negative entries (reported, tiny).
    pub clipped_mass: f64,
}

/// Face drifts s = h * g_f for every face, grouped by axis. Faces along
/// axis d are indexed by their left node (valid where the axis index is
/// below n-1); other slots hold zero.
///
/// For gamma = 2 the drift is the potential increment u_right - u_left,
/// which makes exp(-u) an exact discrete kernel. Otherwise s approximates
/// the line integral of the nodal velocity |grad u|^{gamma-2} grad u across
/// the face with the fourth-order four-point quadrature h(-1,13,13,-1)/24
/// (trapezoid on the wall faces). The kernel of the assembled operator is
/// exp of the accumulated face drifts, so the quadrature order here is
/// exactly the profile accuracy of the computed density.
fn face_drifts(u: &ScalarField, gamma: f64) -> Vec<Vec<f64>> {
    let g = u.grid;
    let dim = g.dim();
    let n = g.nodes_per_axis();
    let h = g.spacing();
    let total = g.node_count();
    let mut out = vec![vec![0.0; total]; dim];
    if gamma == 2.0 {
        for (d, slots) in out.iter_mut().enumerate() {
            let stride = g.stride(d);
            for i in 0..total {
                if g.multi_index(i)[d] + 1 < n {
                    slots[i] = u.values[i + stride] - u.values[i];
                }
            }
        }
        return out;
    }
    let grad = gradient(u);
    let mut speed = vec![0.0; total];
    for i in 0..total {
        let mut q = 0.0;
        for comp in grad.components.iter() {
            q += comp[i] * comp[i];
        }
        speed[i] = q;
    }
    for (d, slots) in out.iter_mut().enumerate() {
        let stride = g.stride(d);
        let comp = &grad.components[d];
        let b = |i: usize| -> f64 {
            let q = speed[i];
            if q > 0.0 {
                q.powf(0.5 * gamma - 1.0) * comp[i]
            } else {
                0.0
            }
        };
        for i in 0..total {
            let t = g.multi_index(i)[d];
            if t + 1 >= n {
                continue;
            }
            slots[i] = if t >= 1 && t + 2 < n {
                h * (-b(i - stride) + 13.0 * b(i) + 13.0 * b(i + stride) - b(i + 2 * stride))
                    / 24.0
            } else {
                0.5 * h * (b(i) + b(i + stride))
            };
        }
    }
    out
}

/// Assemble the finite-volume transport operator K so that K m = 0 is the
/// stationary equation. Rows are scaled by the trapezoid cell volumes, so
/// the volume-weighted column sums vanish and mass is conserved exactly.
pub fn assemble_operator(u: &ScalarField, gamma: f64) -> Csr {
    let g = u.grid;
    let dim = g.dim();
    let n = g.nodes_per_axis();
    let h = g.spacing();
    let total = g.node_count();
    let drifts = face_drifts(u, gamma);
    let mut b = CsrBuilder::with_capacity(total, total * (2 * dim + 1));
    for i in 0..total {
        b.add(i, i, 0.0_f64.max(0.0)); // ensure a diagonal slot exists
    }
    for d in 0..dim {
        let stride = g.stride(d);
        for i in 0..total {
            let t = g.multi_index(i)[d];
            if t + 1 >= n {
                continue;
            }
            let s = drifts[d][i];
            let bs = bernoulli(s) / h;
            let bms = bernoulli(-s) / h;
            // J_f = bs * m_i - bms * m_{i+1}; cell i gains +J_f / w(t),
            // cell i+1 gains -J_f / w(t+1)
            let wl = g.axis_weight(t);
            let wr = g.axis_weight(t + 1);
            b.add(i, i, bs / wl);
            b.add(i, i + stride, -bms / wl);
            b.add(i + stride, i, -bs / wr);
            b.add(i + stride, i + stride, bms / wr);
        }
    }
    b.build()
}

/// Gibbs density with prescribed mass: M exp(-u) / integral exp(-u).
/// The exact stationary density for gamma = 2.
pub fn gibbs_density(u: &ScalarField, mass: f64) -> ScalarField {
    let umin = u.min();
    let unnorm = u.map(|v| (-(v - umin)).exp());
    let z = integrate(&unnorm);
    unnorm.map(|v| mass * v / z)
}

/// Solve for the stationary density of the drift induced by u.
pub fn solve_stationary(u: &ScalarField, params: &KfpParams) -> Result<KfpSolution> {
    params.validate()?;
    let g = u.grid;
    let total = g.node_count();
    let op = assemble_operator(u, params.gamma);
    // row-scale so the shift is meaningful across resolutions
    let diag = op.diagonal();
    let mut scaled = CsrBuilder::with_capacity(total, op.nnz());
    for i in 0..total {
        let d = diag[i];
        if !(d > 0.0) {
            return Err(MfgError::KernelNotSimple(format!(
                "transport operator has nonpositive diagonal {d} in row {i}"
            )));
        }
        for (c, v) in op.row(i) {
            scaled.add(i, c, v / d);
        }
    }
    let scaled = scaled.build();

    let mut shift = params.shift;
    let umin = u.min();
    let mut m: Vec<f64> = u.values.iter().map(|&v| (-(v - umin)).exp()).collect();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut work = vec![0.0; total];
    'shift_ladder: for _attempt in 0..3 {
        let mut shifted = scaled.clone();
        shifted.shift_diagonal(shift);
        let pre = match Precond::ilu(&shifted) {
            Ok(p) => p,
            Err(_) => {
                shift *= 1e3;
                continue 'shift_ladder;
            }
        };
        for _ in 0..params.max_power_iters {
            iterations += 1;
            let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            m.iter_mut().for_each(|v| *v /= scale);
            let rhs = m.clone();
            if bicgstab(&shifted, &rhs, &mut m, &pre, 1e-13, 40 * total + 400).is_err() {
                shift *= 1e3;
                m = rhs;
                continue 'shift_ladder;
            }
            let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            m.iter_mut().for_each(|v| *v /= scale);
            scaled.matvec(&m, &mut work);
            residual = work.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            if residual <= params.tol {
                break 'shift_ladder;
            }
        }
        if residual <= params.tol {
            break;
        }
        shift *= 1e3;
    }
    if residual > params.tol.max(1e-10) {
        return Err(MfgError::LinearSolve {
            residual,
            iterations,
        });
    }
    // Perron kernel of an irreducible M-matrix is strictly positive;
    // clamp the roundoff-level negatives and account for them
    let mut field = ScalarField::from_values(g, m)?;
    let mut clipped = 0.0;
    for i in 0..total {
        if field.values[i] < 0.0 {
            clipped += field.values[i].abs() * g.node_weight(i);
            field.values[i] = 0.0;
        }
    }
    let total_mass = integrate(&field);
    if !(total_mass > 0.0) {
        return Err(MfgError::KernelNotSimple(
            "kernel candidate has no positive mass".into(),
        ));
    }
    let factor = params.mass / total_mass;
    field.values.iter_mut().for_each(|v| *v *= factor);
    Ok(KfpSolution {
        m: field,
        kernel_residual: residual,
        power_iterations: iterations,
        clipped_mass: clipped * factor,
    })
}

/// Cross-check that the stationary kernel is one-dimensional: runs the
/// inverse-power solve from two independent starting shapes and compares.
pub fn verify_simple_kernel(u: &ScalarField, params: &KfpParams) -> Result<()> {
    let from_gibbs = solve_stationary(u, params)?;
    let g = u.grid;
    let mut p2 = params.clone();
    p2.max_power_iters = params.max_power_iters + 4;
    let from_flat = {
        // solving with u = const would change the operator; instead seed the
        // iteration by solving for the kernel of the same operator starting
        // from the uniform density. The public entry always seeds with the
        // Gibbs shape, so inline a one-off variant here.
        let op = assemble_operator(u, p2.gamma);
        let diag = op.diagonal();
        let total = g.node_count();
        let mut scaled = CsrBuilder::with_capacity(total, op.nnz());
        for i in 0..total {
            for (c, v) in op.row(i) {
                scaled.add(i, c, v / diag[i]);
            }
        }
        let mut scaled = scaled.build();
        scaled.shift_diagonal(p2.shift);
        let pre = Precond::ilu(&scaled)?;
        let mut m = vec![1.0; total];
        for _ in 0..p2.max_power_iters {
            let rhs = m.clone();
            bicgstab(&scaled, &rhs, &mut m, &pre, 1e-13, 40 * total + 400)?;
            let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            m.iter_mut().for_each(|v| *v /= scale);
        }
        let mut f = ScalarField::from_values(g, m)?;
        for v in f.values.iter_mut() {
            *v = v.max(0.0);
        }
        let factor = p2.mass / integrate(&f);
        f.values.iter_mut().for_each(|v| *v *= factor);
        f
    };
    let scale = lp_norm(&from_gibbs.m, f64::INFINITY);
    let mut worst = 0.0f64;
    for i in 0..g.node_count() {
        worst = worst.max((from_gibbs.m.values[i] - from_flat.values[i]).abs());
    }
    if worst > 1e-7 * scale {
        return Err(MfgError::KernelNotSimple(format!(
            "kernels from independent seeds differ by {worst:.3e} (scale {scale:.3e})"
        )));
    }
    Ok(())
}

/// The two face pairings whose sum is the exact discrete dual of the
/// stationary equation against u.
#[derive(Debug, Clone, Copy)]
pub struct DualityTerms {
    /// Sum over faces of A_f h sigma(s) (Dm)_f (Du)_f, consistent with the
    /// integral of grad u . grad m.
    pub grad_pairing: f64,
    /// Sum over faces of A_f h g_f avg(m)_f (Du)_f, consistent with the
    /// integral of m |grad u|^gamma.
    pub kinetic_pairing: f64,
}

impl DualityTerms {
    /// The duality defect, identically the weighted residual u^T W (K m).
    pub fn defect(&self) -> f64 {
        self.grad_pairing + self.kinetic_pairing
    }
}

/// Evaluate the two pairings on a (u, m) pair. Both are independent face
/// sums; their total collapses to the duality defect, which vanishes to
/// solver precision when m spans the kernel of the operator built from u.
pub fn duality_terms(u: &ScalarField, m: &ScalarField, gamma: f64) -> DualityTerms {
    assert_eq!(u.grid, m.grid, "fields live on different grids");
    let g = u.grid;
    let dim = g.dim();
    let n = g.nodes_per_axis();
    let h = g.spacing();
    let drifts = face_drifts(u, gamma);
    let mut grad_pairing = 0.0;
    let mut kinetic = 0.0;
    for d in 0..dim {
        let stride = g.stride(d);
        for i in 0..g.node_count() {
            let mi = g.multi_index(i);
            if mi[d] + 1 >= n {
                continue;
            }
            // transverse face area from the trapezoid weights
            let mut area = 1.0;
            for dd in 0..dim {
                if dd != d {
                    area *= g.axis_weight(mi[dd]);
                }
            }
            let s = drifts[d][i];
            let sigma = 0.5 * (bernoulli(s) + bernoulli(-s));
            let du = (u.values[i + stride] - u.values[i]) / h;
            let dm = (m.values[i + stride] - m.values[i]) / h;
            let avg = 0.5 * (m.values[i] + m.values[i + stride]);
            grad_pairing += area * h * sigma * dm * du;
            kinetic += area * (s / h) * h * avg * du;
        }
    }
    DualityTerms {
        grad_pairing,
        kinetic_pairing: kinetic,
    }
}

/// Nodal-quadrature kinetic energy: integral of m |grad u|^gamma using the
/// second-order nodal gradient. Consistent with the kinetic pairing at
/// O(h^2); the two differ by discretization, not by substance.
pub fn kinetic_energy_nodal(u: &ScalarField, m: &ScalarField, gamma: f64) -> f64 {
    let grad = gradient(u);
    let g = u.grid;
    let mut total = 0.0;
    for i in 0..g.node_count() {
        let mut q = 0.0;
        for comp in grad.components.iter() {
            q += comp[i] * comp[i];
        }
        total += g.node_weight(i) * m.values[i] * q.powf(0.5 * gamma);
    }
    total
}

/// Optimal current w = -m |grad u|^{gamma-2} grad u at the nodes.
pub fn optimal_current(u: &ScalarField, m: &ScalarField, gamma: f64) -> VectorField {
    let g = u.grid;
    let grad = gradient(u);
    let mut out = VectorField::zeros(g);
    for i in 0..g.node_count() {
        let mut q = 0.0;
        for comp in grad.components.iter() {
            q += comp[i] * comp[i];
        }
        let factor = if q > 0.0 {
            q.powf(0.5 * gamma - 1.0)
        } else {
            0.0
        };
        for (oc, gc) in out.components.iter_mut().zip(grad.components.iter()) {
            oc[i] = -m.values[i] * factor * gc[i];
        }
    }
    out
}

/// Fraction of the total mass sitting in the outer 10% shell of the box,
/// a direct monitor of truncation quality.
pub fn mass_leak_fraction(m: &ScalarField) -> f64 {
    let g = m.grid;
    let cut = 0.9 * g.half_width();
    let mut outer = 0.0;
    let mut total = 0.0;
    for i in 0..g.node_count() {
        let p = g.position(i);
        let w = g.node_weight(i) * m.values[i];
        total += w;
        let linf = (0..g.dim()).map(|d| p[d].abs()).fold(0.0, f64::max);
        if linf >= cut {
            outer += w;
        }
    }
    if total > 0.0 { outer / total } else { 0.0 }
}

/// One entry of the a priori monitor: the exponent predicted by the regime
/// algebra and the discrete value of the associated functional.
#[derive(Debug, Clone, Copy)]
pub struct MonitorEntry {
    pub exponent: f64,
    pub value: f64,
}

/// A priori integrability monitors for a density m, given the coupling
/// growth exponent p and the Hamiltonian exponent gamma. Entries whose
/// validity window excludes (p, gamma, N) are omitted with a reason.
#[derive(Debug, Clone)]
pub struct AprioriMonitor {
    /// W^{1,r} size of m with r = p gamma' / (gamma' + p - 1).
    pub sobolev: Option<MonitorEntry>,
    /// integral of m^{1 + delta1}, delta1 = (gamma'/N + 1 - p) / (p - 1),
    /// defined for 1 < p < 1 + gamma'/N.
    pub integrability: Option<MonitorEntry>,
    /// integral of m^{1 + delta2}, delta2 = gamma' / (N (p - 1)),
    /// defined for gamma' < N and p <= N / (N - gamma').
    pub higher_integrability: Option<MonitorEntry>,
    /// relative Fisher information, integral of |grad m|^2 / m.
    pub fisher: f64,
    /// reasons for omitted entries
    pub omitted: Vec<String>,
}

pub fn apriori_monitor(m: &ScalarField, p: f64, gamma: f64) -> Result<AprioriMonitor> {
    if !(p > 1.0) {
        return Err(MfgError::InvalidParameter(format!(
            "growth exponent must satisfy p > 1, got {p}"
        )));
    }
    if !(gamma > 1.0) {
        return Err(MfgError::InvalidParameter(format!(
            "hamiltonian exponent must satisfy gamma > 1, got {gamma}"
        )));
    }
    let g = m.grid;
    let nd = g.dim() as f64;
    let gc = gamma_conjugate(gamma);
    let mut omitted = Vec::new();

    let r = p * gc / (gc + p - 1.0);
    let grad = gradient(m);
    let mag = grad.magnitude();
    let mut sob = 0.0;
    for i in 0..g.node_count() {
        sob += g.node_weight(i) * (m.values[i].abs().powf(r) + mag.values[i].powf(r));
    }
    let sobolev = Some(MonitorEntry {
        exponent: r,
        value: sob.powf(1.0 / r),
    });

    let integrability = if p < 1.0 + gc / nd {
        let d1 = (gc / nd + 1.0 - p) / (p - 1.0);
        let mut v = 0.0;
        for i in 0..g.node_count() {
            v += g.node_weight(i) * m.values[i].abs().powf(1.0 + d1);
        }
        Some(MonitorEntry {
            exponent: d1,
            value: v,
        })
    } else {
        omitted.push(format!(
            "integrability gain needs p < 1 + gamma'/N = {}, got p = {p}",
            1.0 + gc / nd
        ));
        None
    };

    let higher = if gc < nd && p <= nd / (nd - gc) {
        let d2 = gc / (nd * (p - 1.0));
        let mut v = 0.0;
        for i in 0..g.node_count() {
            v += g.node_weight(i) * m.values[i].abs().powf(1.0 + d2);
        }
        Some(MonitorEntry {
            exponent: d2,
            value: v,
        })
    } else {
        omitted.push(if gc >= nd {
            format!("higher integrability needs gamma' < N; gamma' = {gc}, N = {nd}")
        } else {
            format!(
                "higher integrability needs p <= N/(N - gamma') = {}, got p = {p}",
                nd / (nd - gc)
            )
        });
        None
    };

    // relative Fisher information with a mass-scaled floor to keep the
    // vacuum region from dominating through roundoff
    let floor = 1e-14 * lp_norm(m, f64::INFINITY).max(f64::MIN_POSITIVE);
    let mut fisher = 0.0;
    for i in 0..g.node_count() {
        fisher += g.node_weight(i) * mag.values[i] * mag.values[i] / m.values[i].max(floor);
    }

    Ok(AprioriMonitor {
        sobolev,
        integrability,
        higher_integrability: higher,
        fisher,
        omitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn zero_drift_gives_uniform_density() {
        for gamma in [1.5, 2.0, 3.0] {
            let g = Grid::new(2, 2.0, 17).unwrap();
            let u = ScalarField::zeros(g);
            let sol = solve_stationary(&u, &KfpParams::new(gamma, 3.0)).unwrap();
            let expect = 3.0 / g.volume();
            for &v in &sol.m.values {
                assert!((v - expect).abs() < 1e-10 * expect, "{v} vs {expect}");
            }
        }
    }

    #[test]
    fn gibbs_density_is_exact_for_quadratic_hamiltonian() {
        // gamma = 2 with potential-increment face drifts: exp(-u) zeroes
        // every face flux identically, for any smooth u
        let g = Grid::new(1, 5.0, 129).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0] + 0.4 * x[0].sin());
        let sol = solve_stationary(&u, &KfpParams::new(2.0, 1.0)).unwrap();
        let gibbs = gibbs_density(&u, 1.0);
        let scale = lp_norm(&gibbs, f64::INFINITY);
        for i in 0..g.node_count() {
            assert!(
                (sol.m.values[i] - gibbs.values[i]).abs() < 1e-12 * scale,
                "node {i}: {} vs {}",
                sol.m.values[i],
                gibbs.values[i]
            );
        }
    }

    #[test]
    fn gibbs_density_is_exact_in_two_dimensions() {
        let g = Grid::new(2, 3.0, 33).unwrap();
        let u = ScalarField::from_fn(g, |x| {
            0.5 * (x[0] * x[0] + 0.8 * x[1] * x[1]) + 0.3 * x[0].sin() * x[1].cos()
        });
        let sol = solve_stationary(&u, &KfpParams::new(2.0, 2.0)).unwrap();
        let gibbs = gibbs_density(&u, 2.0);
        let scale = lp_norm(&gibbs, f64::INFINITY);
        for i in 0..g.node_count() {
            assert!((sol.m.values[i] - gibbs.values[i]).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn cubic_hamiltonian_matches_quadrature_oracle() {
        // gamma = 3, u = x^2/2: the continuum stationary density is
        // C exp(-|x|^3/3); the fourth-order face interpolation keeps the
        // profile error near the 1e-6 level at this resolution
        let g = Grid::new(1, 5.0, 257).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]);
        let sol = solve_stationary(&u, &KfpParams::new(3.0, 1.0)).unwrap();
        let exact_unnorm = ScalarField::from_fn(g, |x| (-x[0].abs().powi(3) / 3.0).exp());
        let z = integrate(&exact_unnorm);
        let exact = exact_unnorm.map(|v| v / z);
        let scale = lp_norm(&exact, f64::INFINITY);
        let mut worst = 0.0f64;
        for i in 0..g.node_count() {
            worst = worst.max((sol.m.values[i] - exact.values[i]).abs() / scale);
        }
        assert!(worst < 1e-5, "profile error {worst}");
    }

    #[test]
    fn duality_terms_cancel_on_the_kernel() {
        let g = Grid::new(2, 3.0, 33).unwrap();
        let u = ScalarField::from_fn(g, |x| {
            0.4 * (x[0] * x[0] + x[1] * x[1]) + 0.2 * (x[0] * 1.3).cos()
        });
        for gamma in [1.5, 2.0, 2.5] {
            let sol = solve_stationary(&u, &KfpParams::new(gamma, 1.0)).unwrap();
            let terms = duality_terms(&u, &sol.m, gamma);
            assert!(
                terms.defect().abs() <= 1e-10 * (1.0 + terms.kinetic_pairing.abs()),
                "gamma {gamma}: defect {} vs kinetic {}",
                terms.defect(),
                terms.kinetic_pairing
            );
            // both pairings individually order one, with opposite signs
            assert!(terms.kinetic_pairing > 0.0);
            assert!(terms.grad_pairing < 0.0);
        }
    }

    #[test]
    fn kinetic_pairing_consistent_with_nodal_quadrature() {
        let g = Grid::new(1, 4.0, 129).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0] + 0.2 * x[0].sin());
        let sol = solve_stationary(&u, &KfpParams::new(2.0, 1.0)).unwrap();
        let terms = duality_terms(&u, &sol.m, 2.0);
        let nodal = kinetic_energy_nodal(&u, &sol.m, 2.0);
        let rel = (terms.kinetic_pairing - nodal).abs() / nodal;
        assert!(rel < 2e-3, "face {} vs nodal {nodal}", terms.kinetic_pairing);
    }

    #[test]
    fn mass_is_exact_and_density_positive() {
        let g = Grid::new(2, 3.0, 25).unwrap();
        let u = ScalarField::from_fn(g, |x| x[0] * x[0] + 0.5 * x[1] * x[1]);
        let sol = solve_stationary(&u, &KfpParams::new(1.5, 2.5)).unwrap();
        assert!((integrate(&sol.m) - 2.5).abs() < 1e-12 * 2.5);
        assert!(sol.m.values.iter().all(|&v| v > 0.0));
        assert_eq!(sol.clipped_mass, 0.0);
    }

    #[test]
    fn kernel_is_simple_for_confining_drift() {
        let g = Grid::new(1, 3.0, 65).unwrap();
        let u = ScalarField::from_fn(g, |x| x[0] * x[0]);
        verify_simple_kernel(&u, &KfpParams::new(2.0, 1.0)).unwrap();
    }

    #[test]
    fn mass_leak_detects_wall_mass() {
        let g = Grid::new(1, 6.0, 129).unwrap();
        let confined = gibbs_density(&ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]), 1.0);
        assert!(mass_leak_fraction(&confined) < 1e-6);
        let flat = ScalarField::constant(g, 1.0);
        let leak = mass_leak_fraction(&flat);
        // outer shell is 10% of the box on each side
        assert!((leak - 0.1).abs() < 0.02, "leak {leak}");
    }

    #[test]
    fn monitor_exponents_match_regime_algebra() {
        let g = Grid::new(1, 3.0, 33).unwrap();
        let m = gibbs_density(&ScalarField::from_fn(g, |x| x[0] * x[0]), 1.0);
        // r = p gamma'/(gamma' + p - 1) = 4/3 at p = 2, gamma = 2
        let mon = apriori_monitor(&m, 2.0, 2.0).unwrap();
        let r = mon.sobolev.unwrap().exponent;
        assert!((r - 4.0 / 3.0).abs() < 1e-14);
        assert!(mon.fisher.is_finite() && mon.fisher > 0.0);
    }

    #[test]
    fn monitor_delta1_spot_check() {
        // delta1 = 1 at p = 4/3, gamma' = 2, N = 3
        let g = Grid::new(3, 1.5, 9).unwrap();
        let m = ScalarField::constant(g, 1.0);
        let mon = apriori_monitor(&m, 4.0 / 3.0, 2.0).unwrap();
        let d1 = mon.integrability.unwrap().exponent;
        assert!((d1 - 1.0).abs() < 1e-14, "delta1 {d1}");
        // and the product identity (1 + delta1) p = 2 gamma'/(N - alpha)
        // at p = 2N/(N + alpha): alpha = 1, N = 3 gives p = 3/2
        let mon2 = apriori_monitor(&m, 1.5, 2.0).unwrap();
        let d1b = mon2.integrability.unwrap().exponent;
        assert!(((1.0 + d1b) * 1.5 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn monitor_omits_out_of_range_entries_with_reasons() {
        let g = Grid::new(1, 2.0, 17).unwrap();
        let m = ScalarField::constant(g, 1.0);
        // gamma' = 2 >= N = 1: higher integrability must be omitted
        let mon = apriori_monitor(&m, 1.2, 2.0).unwrap();
        assert!(mon.higher_integrability.is_none());
        assert!(mon.omitted.iter().any(|s| s.contains("gamma'")));
        // p far above 1 + gamma'/N: integrability gain omitted
        let mon2 = apriori_monitor(&m, 10.0, 2.0).unwrap();
        assert!(mon2.integrability.is_none());
        assert!(!mon2.omitted.is_empty());
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = Grid::new(1, 2.0, 17).unwrap();
        let u = ScalarField::zeros(g);
        assert!(solve_stationary(&u, &KfpParams::new(1.0, 1.0)).is_err());
        assert!(solve_stationary(&u, &KfpParams::new(2.0, 0.0)).is_err());
        assert!(apriori_monitor(&u, 0.5, 2.0).is_err());
    }
}
