//! Solution diagnostics: the integral identities a stationary pair must
//! satisfy, the scaling (Pohozaev-type) relation, a sign-based
//! nonexistence certificate, the constrained energy, and the report
//! structure bundling them for serialization.
//!
//! Identity conventions, writing E = integral of m |grad u|^gamma,
//! D = double integral of m(x) |x-y|^{alpha-N} m(y), P = integral of m V,
//! gamma' = gamma/(gamma-1), M = mass:
//!
//! ```text
//!   duality:   integral grad u . grad m + E                      = 0
//!   tested:    integral grad u . grad m + E/gamma + lambda M - P + D = 0
//!   kinetic:   E - gamma' (lambda M - P + D)                     = 0
//!   scaling:   (N - alpha - 2 gamma')/2 * D - gamma' lambda M    = 0   (V = 0)
//! ```
//!
//! The duality identity is realized through the face pairings of the
//! transport discretization and vanishes to solver precision; the others
//! are independent quadratures and converge at the discretization order.

use crate::error::{MfgError, Result};
use crate::grid::{ScalarField, VectorField, gradient, integrate, integrate_product, lp_norm};
use crate::kfp::{DualityTerms, duality_terms, gamma_conjugate, kinetic_energy_nodal,
    mass_leak_fraction};
use crate::riesz::RieszOperator;
use std::collections::BTreeMap;

/// Combined scaling identity residual for a vanishing external potential,
/// normalized by 1 + |lambda| N M.
pub fn pohozaev_residual(
    riesz: &RieszOperator,
    m: &ScalarField,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    let mass = integrate(m);
    if !(mass > 0.0) {
        return Err(MfgError::InvalidParameter(format!(
            "scaling identity needs positive mass, got {mass}"
        )));
    }
    let nd = m.grid.dim() as f64;
    let gc = gamma_conjugate(gamma);
    let d = riesz.pairing(m, m);
    let raw = 0.5 * (nd - riesz.alpha() - 2.0 * gc) * d - gc * lambda * mass;
    Ok(raw / (1.0 + lambda.abs() * nd * mass))
}

/// Residuals of the three integral identities, each normalized by the
/// largest participating term (so a residual of 1e-3 means three digits of
/// cancellation regardless of the solution's scale).
#[derive(Debug, Clone, Copy)]
pub struct IdentityResiduals {
    /// duality pairing defect
    pub duality: f64,
    /// equation tested against the density
    pub tested: f64,
    /// kinetic identity
    pub kinetic: f64,
}

fn normalized(sum: f64, terms: &[f64]) -> f64 {
    let scale = terms.iter().fold(1.0f64, |a, &t| a.max(t.abs()));
    sum / scale
}

/// Evaluate the identity residuals for a candidate stationary pair.
/// `potential` is the external potential sampled on the grid (`None`
/// means identically zero).
pub fn identity_residuals(
    u: &ScalarField,
    m: &ScalarField,
    lambda: f64,
    gamma: f64,
    riesz: &RieszOperator,
    potential: Option<&ScalarField>,
) -> IdentityResiduals {
    let terms = duality_terms(u, m, gamma);
    let mass = integrate(m);
    let d = riesz.pairing(m, m);
    let p = potential.map_or(0.0, |v| integrate_product(m, v));
    let gc = gamma_conjugate(gamma);
    let e = terms.kinetic_pairing;
    let t1 = terms.grad_pairing;

    let duality = normalized(t1 + e, &[t1, e]);
    let tested = normalized(
        t1 + e / gamma + lambda * mass - p + d,
        &[t1, e / gamma, lambda * mass, p, d],
    );
    let kinetic = normalized(
        e - gc * (lambda * mass - p + d),
        &[e, gc * lambda * mass, gc * p, gc * d],
    );
    IdentityResiduals {
        duality,
        tested,
        kinetic,
    }
}

/// Outcome of the sign-based nonexistence test built on the scaling
/// identity (valid for a vanishing external potential).
#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// alpha < N - 2 gamma' and the computed signs contradict the identity:
    /// no stationary pair with these invariants can exist.
    SignConflict {
        lambda: f64,
        interaction: f64,
    },
    /// alpha >= N - 2 gamma': the sign obstruction has no force.
    NotApplicable {
        reason: String,
    },
    /// The obstruction regime holds but the signs are compatible; the
    /// scaling identity residual quantifies how consistent the pair is.
    Consistent {
        residual: f64,
    },
}

pub fn nonexistence_certificate(
    dim: usize,
    alpha: f64,
    gamma: f64,
    lambda: f64,
    interaction: f64,
    mass: f64,
) -> Certificate {
    let nd = dim as f64;
    let gc = gamma_conjugate(gamma);
    let threshold = nd - 2.0 * gc;
    if alpha >= threshold {
        return Certificate::NotApplicable {
            reason: format!(
                "alpha = {alpha} >= N - 2 gamma' = {threshold}: scaling sign obstruction void"
            ),
        };
    }
    if lambda <= 0.0 && interaction > 0.0 {
        return Certificate::SignConflict {
            lambda,
            interaction,
        };
    }
    Certificate::Consistent {
        residual: (0.5 * (nd - alpha - 2.0 * gc) * interaction - gc * lambda * mass).abs(),
    }
}

/// Value of the constrained energy, with an explicit flag for the
/// convention that a current flowing through vacuum costs infinity.
#[derive(Debug, Clone, Copy)]
pub struct EnergyValue {
    pub value: f64,
    pub infinite: bool,
}

/// E(m, w) = integral of (m/gamma') |w/m|^{gamma'} + integral of V m
/// - (1/2) double integral of m K m. Nodes with m = 0 contribute zero if
/// w = 0 there and make the energy +infinity otherwise.
pub fn energy(
    m: &ScalarField,
    w: &VectorField,
    gamma: f64,
    riesz: &RieszOperator,
    potential: Option<&ScalarField>,
) -> EnergyValue {
    let g = m.grid;
    let gc = gamma_conjugate(gamma);
    let mut kinetic = 0.0;
    for i in 0..g.node_count() {
        let mut w2 = 0.0;
        for comp in w.components.iter() {
            w2 += comp[i] * comp[i];
        }
        let mi = m.values[i];
        if mi <= 0.0 {
            if w2 > 0.0 {
                return EnergyValue {
                    value: f64::INFINITY,
                    infinite: true,
                };
            }
            continue;
        }
        kinetic += g.node_weight(i) * mi * (w2.sqrt() / mi).powf(gc) / gc;
    }
    let pot = potential.map_or(0.0, |v| integrate_product(m, v));
    let inter = 0.5 * riesz.pairing(m, m);
    EnergyValue {
        value: kinetic + pot - inter,
        infinite: false,
    }
}

/// Everything a solved pair reports, ready for serialization.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub mass: f64,
    pub lambda: f64,
    /// kinetic energy from the face pairing and from nodal quadrature
    pub kinetic_flux: f64,
    pub kinetic_nodal: f64,
    pub grad_pairing: f64,
    pub interaction: f64,
    pub potential_integral: f64,
    pub identities: IdentityResiduals,
    /// scaling residual; absent when an external potential is present
    pub pohozaev: Option<f64>,
    pub certificate: Certificate,
    pub energy: EnergyValue,
    pub mass_leak: f64,
    pub norms: BTreeMap<String, f64>,
}

pub fn diagnose(
    u: &ScalarField,
    m: &ScalarField,
    lambda: f64,
    gamma: f64,
    riesz: &RieszOperator,
    potential: Option<&ScalarField>,
) -> Result<DiagnosticsReport> {
    let mass = integrate(m);
    let terms: DualityTerms = duality_terms(u, m, gamma);
    let identities = identity_residuals(u, m, lambda, gamma, riesz, potential);
    let interaction = riesz.pairing(m, m);
    let pot = potential.map_or(0.0, |v| integrate_product(m, v));
    let pohozaev = if potential.is_none() {
        Some(pohozaev_residual(riesz, m, lambda, gamma)?)
    } else {
        None
    };
    let certificate = nonexistence_certificate(
        m.grid.dim(),
        riesz.alpha(),
        gamma,
        lambda,
        interaction,
        mass,
    );
    let w = crate::kfp::optimal_current(u, m, gamma);
    let energy = energy(m, &w, gamma, riesz, potential);
    let mut norms = BTreeMap::new();
    norms.insert("m_l1".into(), lp_norm(m, 1.0));
    norms.insert("m_l2".into(), lp_norm(m, 2.0));
    norms.insert("m_linf".into(), lp_norm(m, f64::INFINITY));
    norms.insert(
        "grad_u_linf".into(),
        lp_norm(&gradient(u).magnitude(), f64::INFINITY),
    );

    // A priori estimate monitors, keyed by stable report tags. Each value
    // is a ratio that the corresponding estimate asserts stays bounded
    // under grid refinement; none of the bounding constants is known, so
    // boundedness is checked across sweeps rather than against a number.
    let e_kin = kinetic_energy_nodal(u, m, gamma);
    let nd = m.grid.dim() as f64;
    let gc = gamma_conjugate(gamma);
    let p = 2.0 * nd / (nd + riesz.alpha());
    if e_kin > 0.0 {
        let monitor = crate::kfp::apriori_monitor(m, p, gamma)?;
        if let Some(sob) = monitor.sobolev {
            norms.insert(
                "mW".into(),
                sob.value / ((e_kin + mass).powf(1.0 / gc) * lp_norm(m, p).powf(1.0 / gamma)),
            );
        }
        if p < 1.0 + gc / nd {
            let d1 = (gc / nd + 1.0 - p) / (p - 1.0);
            let e1 = (1.0 + d1) * p;
            norms.insert(
                "stima_int".into(),
                lp_norm(m, p).powf(e1) / (mass.powf(e1 - 1.0) * e_kin),
            );
        }
        if gc < nd {
            let d2 = gc / (nd * (p - 1.0));
            norms.insert(
                "mdeltap".into(),
                lp_norm(m, p).powf(p * d2) / ((e_kin + mass) * mass.powf(p * d2 - 1.0)),
            );
        }
    }
    // representative exponent inside the valid integrability window
    let beta = if gc < nd {
        0.5 * (1.0 + nd / (nd - gc))
    } else {
        2.0 * gc
    };
    norms.insert("kolm_i".into(), lp_norm(m, beta) / (e_kin + mass));
    Ok(DiagnosticsReport {
        mass,
        lambda,
        kinetic_flux: terms.kinetic_pairing,
        kinetic_nodal: kinetic_energy_nodal(u, m, gamma),
        grad_pairing: terms.grad_pairing,
        interaction,
        potential_integral: pot,
        identities,
        pohozaev,
        certificate,
        energy,
        mass_leak: mass_leak_fraction(m),
        norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::kfp::{KfpParams, optimal_current, solve_stationary};

    fn gaussian_density(g: Grid, mass: f64) -> ScalarField {
        let raw = ScalarField::from_fn(g, |x| {
            let r2: f64 = (0..g.dim()).map(|d| x[d] * x[d]).sum();
            (-r2).exp()
        });
        let z = integrate(&raw);
        raw.map(|v| mass * v / z)
    }

    #[test]
    fn certificate_truth_table() {
        // N = 3, gamma = 3 -> gamma' = 1.5 -> threshold N - 2 gamma' = 0
        // use gamma' = 1.25 (gamma = 5) for a positive threshold 0.5
        let c = nonexistence_certificate(3, 0.2, 5.0, -1.0, 2.0, 1.0);
        assert!(matches!(c, Certificate::SignConflict { .. }), "{c:?}");
        // same regime, positive lambda: consistent with a residual
        let c = nonexistence_certificate(3, 0.2, 5.0, 1.0, 2.0, 1.0);
        assert!(matches!(c, Certificate::Consistent { .. }));
        // exactly at the threshold: not applicable
        let c = nonexistence_certificate(3, 0.5, 5.0, -1.0, 2.0, 1.0);
        assert!(matches!(c, Certificate::NotApplicable { .. }));
        // above the threshold: not applicable
        let c = nonexistence_certificate(3, 2.0, 5.0, -1.0, 2.0, 1.0);
        assert!(matches!(c, Certificate::NotApplicable { .. }));
        // lambda <= 0 but interaction zero escapes the conflict
        let c = nonexistence_certificate(3, 0.2, 5.0, 0.0, 0.0, 1.0);
        assert!(matches!(c, Certificate::Consistent { .. }));
    }

    #[test]
    fn certificate_consistent_residual_value() {
        // residual = |(N - 2 gamma' - alpha)/2 * D - gamma' lambda M|
        let c = nonexistence_certificate(3, 0.25, 5.0, 2.0, 1.5, 0.5);
        let gc = 1.25f64;
        let expect = (0.5 * (3.0 - 0.25 - 2.0 * gc) * 1.5 - gc * 2.0 * 0.5).abs();
        match c {
            Certificate::Consistent { residual } => {
                assert!((residual - expect).abs() < 1e-14)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pohozaev_perturbation_moves_by_known_amount() {
        // unnormalized residual is affine in lambda with slope -gamma' M, so
        // shifting lambda by 0.1 N / gamma' moves it by exactly -0.1 N M
        let g = Grid::new(2, 4.0, 49).unwrap();
        let mass = 1.7;
        let m = gaussian_density(g, mass);
        let op = RieszOperator::new(g, 1.2).unwrap();
        let gamma = 2.0;
        let gc = gamma_conjugate(gamma);
        let nd = 2.0;
        let l1 = 0.3;
        let l2 = l1 + 0.1 * nd / gc;
        let r1 = pohozaev_residual(&op, &m, l1, gamma).unwrap();
        let r2 = pohozaev_residual(&op, &m, l2, gamma).unwrap();
        let raw1 = r1 * (1.0 + l1.abs() * nd * mass);
        let raw2 = r2 * (1.0 + l2.abs() * nd * mass);
        let moved = raw2 - raw1;
        let expect = -0.1 * nd * mass;
        assert!(
            (moved - expect).abs() < 1e-12 * expect.abs(),
            "{moved} vs {expect}"
        );
    }

    #[test]
    fn pohozaev_rejects_vanishing_mass() {
        let g = Grid::new(1, 2.0, 17).unwrap();
        let m = ScalarField::zeros(g);
        let op = RieszOperator::new(g, 0.5).unwrap();
        assert!(pohozaev_residual(&op, &m, 1.0, 2.0).is_err());
    }

    #[test]
    fn identities_hold_on_a_solved_pair() {
        // Solve the uncoupled system (data f = V, no interaction): u from
        // the ergodic solver, m its exact discrete stationary density.
        // Duality cancels to solver precision; the identity tested against
        // the density (with D absent) converges at second order.
        let mut residuals = Vec::new();
        for n in [65usize, 129] {
            let g = Grid::new(1, 6.0, n).unwrap();
            let vfield = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]);
            let hjb =
                crate::hjb::solve_ergodic(&vfield, &crate::hjb::HjbParams::new(2.0), None)
                    .unwrap();
            let sol = solve_stationary(&hjb.u, &KfpParams::new(2.0, 1.0)).unwrap();
            let terms = duality_terms(&hjb.u, &sol.m, 2.0);
            assert!(
                terms.defect().abs() <= 1e-10 * (1.0 + terms.kinetic_pairing.abs()),
                "duality defect {}",
                terms.defect()
            );
            let mass = integrate(&sol.m);
            let p = integrate_product(&sol.m, &vfield);
            let tested =
                terms.grad_pairing + terms.kinetic_pairing / 2.0 + hjb.lambda * mass - p;
            let scale = [terms.grad_pairing, hjb.lambda * mass, p]
                .iter()
                .fold(1.0f64, |a, t| a.max(t.abs()));
            residuals.push((tested / scale).abs());
        }
        assert!(residuals[0] < 1e-2, "coarse residual {}", residuals[0]);
        assert!(
            residuals[1] < 0.35 * residuals[0],
            "no second-order shrinkage: {residuals:?}"
        );
    }

    #[test]
    fn energy_flags_current_through_vacuum() {
        let g = Grid::new(1, 2.0, 17).unwrap();
        let mut m = ScalarField::constant(g, 1.0);
        m.values[3] = 0.0;
        let mut w = VectorField::zeros(g);
        w.components[0][3] = 0.5;
        let op = RieszOperator::new(g, 0.5).unwrap();
        let e = energy(&m, &w, 2.0, &op, None);
        assert!(e.infinite);
        // zero current over the vacuum node is fine
        w.components[0][3] = 0.0;
        let e = energy(&m, &w, 2.0, &op, None);
        assert!(!e.infinite && e.value.is_finite());
    }

    #[test]
    fn energy_matches_direct_evaluation_for_gibbs_pair() {
        let g = Grid::new(1, 5.0, 129).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]);
        let m = crate::kfp::gibbs_density(&u, 1.0);
        let w = optimal_current(&u, &m, 2.0);
        let op = RieszOperator::new(g, 0.5).unwrap();
        let vfield = ScalarField::from_fn(g, |x| x[0].abs());
        let e = energy(&m, &w, 2.0, &op, Some(&vfield));
        // gamma' = 2: kinetic integrand (m/2)|w/m|^2 = (1/2) m |grad u|^2
        let grad = gradient(&u);
        let mut kinetic = 0.0;
        for i in 0..g.node_count() {
            kinetic +=
                g.node_weight(i) * 0.5 * m.values[i] * grad.components[0][i].powi(2);
        }
        let expect = kinetic + integrate_product(&m, &vfield) - 0.5 * op.pairing(&m, &m);
        assert!((e.value - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn report_collects_consistent_entries() {
        let g = Grid::new(1, 5.0, 65).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]);
        let sol = solve_stationary(&u, &KfpParams::new(2.0, 1.0)).unwrap();
        let op = RieszOperator::new(g, 0.5).unwrap();
        let rep = diagnose(&u, &sol.m, 1.0, 2.0, &op, None).unwrap();
        assert!((rep.mass - 1.0).abs() < 1e-10);
        assert!(rep.pohozaev.is_some());
        assert!(rep.identities.duality.abs() < 1e-10);
        // the two kinetic quadratures differ at O(h^2); n = 65 here
        assert!((rep.kinetic_flux - rep.kinetic_nodal).abs() < 2e-2 * rep.kinetic_nodal);
        assert!(rep.norms.contains_key("m_linf"));
        assert!(!rep.energy.infinite);
        // gaussian tail beyond 0.9 L = 4.5 is a few parts in 1e6
        assert!(rep.mass_leak < 1e-4);
        // with an explicit potential the scaling residual is not reported
        let vf = ScalarField::from_fn(g, |x| x[0] * x[0]);
        let rep2 = diagnose(&u, &sol.m, 1.0, 2.0, &op, Some(&vf)).unwrap();
        assert!(rep2.pohozaev.is_none());
        assert!(rep2.potential_integral > 0.0);
    }

    #[test]
    fn estimate_monitors_stay_bounded_under_refinement() {
        // the monitored ratios approximate continuum quantities, so they
        // must stabilize as the grid refines instead of drifting
        let ratios: Vec<BTreeMap<String, f64>> = [65usize, 129, 257]
            .iter()
            .map(|&n| {
                let g = Grid::new(1, 5.0, n).unwrap();
                let u = ScalarField::from_fn(g, |x| 0.5 * x[0] * x[0]);
                let sol = solve_stationary(&u, &KfpParams::new(2.0, 1.0)).unwrap();
                let op = RieszOperator::new(g, 0.5).unwrap();
                diagnose(&u, &sol.m, 1.0, 2.0, &op, None).unwrap().norms
            })
            .collect();
        for key in ["mW", "stima_int", "kolm_i"] {
            let vals: Vec<f64> = ratios
                .iter()
                .map(|r| *r.get(key).unwrap_or_else(|| panic!("missing {key}")))
                .collect();
            for v in &vals {
                assert!(v.is_finite() && *v > 0.0, "{key}: {vals:?}");
            }
            let spread = vals.iter().cloned().fold(0.0f64, f64::max)
                / vals.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(spread < 1.05, "{key} drifts under refinement: {vals:?}");
        }
        // gamma' = 2 >= N = 1 puts mdeltap outside its validity window
        assert!(!ratios[0].contains_key("mdeltap"));
        let g = Grid::new(2, 3.0, 17).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]));
        let sol = solve_stationary(&u, &KfpParams::new(3.0, 1.0)).unwrap();
        let op = RieszOperator::new(g, 1.0).unwrap();
        let rep = diagnose(&u, &sol.m, 1.0, 3.0, &op, None).unwrap();
        // gamma' = 1.5 < N = 2: the higher-integrability window opens
        assert!(rep.norms.contains_key("mdeltap"));
    }
}
