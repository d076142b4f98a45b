//! Optimality checks, finite-difference oracles, rate fitting and error
//! measures shared by tests, the acceptance harness and the studies.

use serde::Serialize;

use crate::cg::{CgSettings, PrecondKind, Preconditioner};
use crate::eigen::{smallest_eigpairs_prec, EigenSettings};
use crate::error::{invalid, Result};
use crate::field::Layout;
use crate::models::{eigen_residual, EigenResidual, EnergyModel, MetricOperator};
use crate::solvers::{gfdn_step, mdrgm_step};
use crate::sparse::SparseSym;
use crate::vecops::{dot, dot_compensated, norm2, norm_max};

/// First-order condition E′(u) = λMu.
pub fn check_first_order(model: &dyn EnergyModel, u: &[f64]) -> Result<EigenResidual> {
    eigen_residual(model, u)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    pub lambda: f64,
    pub first_order_residual_max: f64,
    pub first_order_residual_dual: f64,
    /// Smallest eigenvalues of E″(u) on T_u𝕊, ascending.
    pub tangent_eigs: Vec<f64>,
    /// eig₂ − eig₁ > `gap_tol`.
    pub quasi_isolated: bool,
    pub gap_tol: f64,
    /// L² distance between the first tangent eigenvector and iu/‖iu‖ after
    /// sign alignment; `None` for real fields.
    pub phase_mode_distance: Option<f64>,
    pub eigen_iterations: usize,
}

impl OptimalityReport {
    pub fn eig1_rel_error(&self) -> f64 {
        (self.tangent_eigs[0] - self.lambda).abs() / self.lambda.abs()
    }

    pub fn gap(&self) -> f64 {
        self.tangent_eigs.get(1).map_or(f64::NAN, |e| e - self.tangent_eigs[0])
    }
}

/// Approximate 𝓛_u⁻¹ by a few preconditioned CG steps.
struct MetricPrecond<'a> {
    metric: Box<dyn MetricOperator + 'a>,
    settings: CgSettings,
}

impl Preconditioner for MetricPrecond<'_> {
    fn apply_into(&self, r: &[f64], z: &mut [f64]) {
        match self.metric.solve_shifted(0.0, 1.0, r, None, &self.settings) {
            Ok((x, _)) => z.copy_from_slice(&x),
            Err(_) => z.copy_from_slice(r),
        }
    }
}

/// Second-order check: k smallest eigenvalues of E″(u) on {v : (u,v)_{L²} = 0}.
pub fn check_second_order(model: &dyn EnergyModel, u: &[f64], k: usize) -> Result<OptimalityReport> {
    let first = check_first_order(model, u)?;
    let hess = model.hessian(u)?;
    let prec = MetricPrecond {
        metric: model.metric(u)?,
        settings: CgSettings {
            tol: 1e-2,
            max_iter: Some(50),
            precond: PrecondKind::Factorized,
        },
    };
    let settings = EigenSettings {
        tol: 1e-7,
        max_iter: 1000,
        ..EigenSettings::default()
    };
    let rep = smallest_eigpairs_prec(
        hess.as_ref(),
        model.mass(),
        k,
        &[u.to_vec()],
        &settings,
        &prec,
    )?;
    let layout = model.layout();
    let phase_mode_distance = if layout.flavor.is_complex() {
        let iu = layout.times_i(u);
        let v = &rep.vectors[0];
        let m = model.mass();
        let c = dot(v, &m.matvec(&iu)) / (model.mass_norm(v) * model.mass_norm(&iu));
        Some((2.0 - 2.0 * c.abs()).max(0.0).sqrt())
    } else {
        None
    };
    let gap_tol = 1e-3 * rep.values[0].abs();
    Ok(OptimalityReport {
        lambda: first.lambda,
        first_order_residual_max: first.residual_max,
        first_order_residual_dual: first.residual_dual,
        quasi_isolated: rep.values.len() > 1 && rep.values[1] - rep.values[0] > gap_tol,
        tangent_eigs: rep.values,
        gap_tol,
        phase_mode_distance,
        eigen_iterations: rep.iterations,
    })
}

/// Finite-difference sweep: mismatch(h) for each step size and the fitted order.
#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub steps: Vec<f64>,
    pub mismatches: Vec<f64>,
    /// Scale the mismatches are measured against.
    pub reference: f64,
    /// Least-squares order; `None` if some mismatch is exactly zero.
    pub slope: Option<f64>,
}

impl FdReport {
    pub fn max_relative_mismatch(&self) -> f64 {
        self.mismatches.iter().cloned().fold(0.0, f64::max) / self.reference.max(1.0)
    }
}

/// Default geometric step sizes 0.1·2⁻ᵏ, k = 0..4.
pub fn default_fd_steps() -> Vec<f64> {
    (0..5).map(|k| 0.1 * 0.5f64.powi(k)).collect()
}

fn fd_report(steps: &[f64], mismatches: Vec<f64>, reference: f64) -> FdReport {
    let slope = if mismatches.iter().all(|m| *m > 0.0) && steps.len() >= 2 {
        let pts: Vec<(f64, f64)> = steps.iter().cloned().zip(mismatches.iter().cloned()).collect();
        fit_rates(&pts).ok().map(|f| f.slope)
    } else {
        None
    };
    FdReport {
        steps: steps.to_vec(),
        mismatches,
        reference,
        slope,
    }
}

/// |(E(u+hv) − E(u−hv))/2h − ⟨E′(u), v⟩| over `steps`.
pub fn fd_gradient_check(model: &dyn EnergyModel, u: &[f64], v: &[f64], steps: &[f64]) -> FdReport {
    let exact = dot_compensated(&model.gradient(u), v);
    let mism = steps
        .iter()
        .map(|&h| {
            let up: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let um: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - h * b).collect();
            ((model.energy(&up) - model.energy(&um)) / (2.0 * h) - exact).abs()
        })
        .collect();
    fd_report(steps, mism, exact.abs())
}

/// ‖(E′(u+hv) − E′(u−hv))/2h − E″(u)v‖∞ over `steps`.
pub fn fd_hessian_check(model: &dyn EnergyModel, u: &[f64], v: &[f64], steps: &[f64]) -> Result<FdReport> {
    let hv = model.hessian(u)?.apply(v);
    let mism = steps
        .iter()
        .map(|&h| {
            let up: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let um: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - h * b).collect();
            let gp = model.gradient(&up);
            let gm = model.gradient(&um);
            let d: Vec<f64> = gp
                .iter()
                .zip(&gm)
                .zip(&hv)
                .map(|((p, m), e)| (p - m) / (2.0 * h) - e)
                .collect();
            norm_max(&d)
        })
        .collect();
    Ok(fd_report(steps, mism, norm_max(&hv)))
}

/// ‖E′(u) − 𝓛_u u‖ / ‖E′(u)‖.
pub fn metric_identity_error(model: &dyn EnergyModel, u: &[f64]) -> Result<f64> {
    let g = model.gradient(u);
    let lu = model.metric(u)?.apply(u);
    let d: Vec<f64> = g.iter().zip(&lu).map(|(a, b)| a - b).collect();
    Ok(norm2(&d) / norm2(&g).max(f64::MIN_POSITIVE))
}

/// max over phases of |E(e^{iω}u) − E(u)| / max(1, |E(u)|).
pub fn phase_invariance_error(model: &dyn EnergyModel, u: &[f64], phases: &[f64]) -> f64 {
    let layout = model.layout();
    let e0 = model.energy(u);
    phases
        .iter()
        .map(|&w| (model.energy(&layout.rotate_phase(u, w)) - e0).abs() / e0.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of log₂ error against log₂ H.
    pub slope: f64,
    /// Slopes between consecutive points.
    pub segment_slopes: Vec<f64>,
}

pub fn fit_rates(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return invalid("a rate fit needs at least two points");
    }
    if points.iter().any(|&(h, e)| !(h > 0.0) || !(e > 0.0)) {
        return invalid("rate fits need positive mesh sizes and errors");
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.log2()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("rate fit needs distinct mesh sizes");
    }
    let segment_slopes = lx
        .windows(2)
        .zip(ly.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();
    Ok(RateFit {
        points: points.to_vec(),
        slope: sxy / sxx,
        segment_slopes,
    })
}

/// Rotates u by the global phase (or sign, for real fields) that maximizes
/// Re(u_ref, u)_{L²}.
pub fn phase_align(layout: &Layout, mass: &SparseSym, reference: &[f64], u: &[f64]) -> Vec<f64> {
    let mr = mass.matvec(reference);
    let re = dot_compensated(u, &mr);
    if !layout.flavor.is_complex() {
        return if re < 0.0 { u.iter().map(|x| -x).collect() } else { u.to_vec() };
    }
    // Im(u_ref, u) = −(u_ref, iu) in the real layout.
    let im = -dot_compensated(&layout.times_i(u), &mr);
    layout.rotate_phase(u, -im.atan2(re))
}

/// H¹ and energy errors of an approximation against a reference state on the same space.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StateErrors {
    pub h1: f64,
    pub energy: f64,
    /// Σ_c ‖|u_c|² − |u_ref,c|²‖_{L²}, using the consistent mass matrix.
    pub density_l2: f64,
}

pub fn state_errors(model: &dyn EnergyModel, reference: &[f64], u: &[f64]) -> StateErrors {
    let layout = model.layout();
    let ua = phase_align(&layout, model.mass(), reference, u);
    let d: Vec<f64> = ua.iter().zip(reference).map(|(a, b)| a - b).collect();
    let h1 = model.h1_norm(&d);
    let energy = (model.energy(u) - model.energy(reference)).abs();
    StateErrors {
        h1,
        energy,
        density_l2: density_error(model, reference, u),
    }
}

/// Nodal densities compared in the mass norm of one scalar slot.
fn density_error(model: &dyn EnergyModel, reference: &[f64], u: &[f64]) -> f64 {
    let layout = model.layout();
    let parts = layout.flavor.parts();
    let n = layout.n;
    // The scalar mass block sits in slot 0.
    let idx: Vec<usize> = (0..n).map(|i| layout.slot_index(0, i)).collect();
    let m = SparseSym::from_csr_trusted(model.mass().submatrix(&idx, &idx));
    (0..layout.flavor.components())
        .map(|c| {
            let d: Vec<f64> = (0..n)
                .map(|i| {
                    let mut s = 0.0;
                    for p in 0..parts {
                        let k = layout.index(c, i, p);
                        s += u[k] * u[k] - reference[k] * reference[k];
                    }
                    s
                })
                .collect();
            dot(&d, &m.matvec(&d)).max(0.0).sqrt()
        })
        .sum()
}

/// Distance after phase alignment between u and one step of each scheme from u.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FixedPointDefects {
    pub mdrgm: f64,
    pub inverse_iteration: f64,
    pub gfdn: f64,
}

impl FixedPointDefects {
    pub fn max(&self) -> f64 {
        self.mdrgm.max(self.inverse_iteration).max(self.gfdn)
    }
}

pub fn fixed_point_defects(model: &dyn EnergyModel, u: &[f64], tau: f64, gfdn_tau: f64) -> Result<FixedPointDefects> {
    let layout = model.layout();
    let dist = |v: Vec<f64>| {
        let va = phase_align(&layout, model.mass(), u, &v);
        let d: Vec<f64> = va.iter().zip(u).map(|(a, b)| a - b).collect();
        model.mass_norm(&d)
    };
    Ok(FixedPointDefects {
        mdrgm: dist(mdrgm_step(model, u, tau)?.0),
        inverse_iteration: dist(mdrgm_step(model, u, 1.0)?.0),
        gfdn: dist(gfdn_step(model, u, gfdn_tau)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Field, Flavor};
    use crate::mesh::{Mesh, Rect};
    use crate::models::{constant, identity_coef, FemModel, ModelParams};
    use crate::space::FeSpace;
    use num_complex::Complex64;
    use std::sync::Arc;

    #[test]
    fn rate_fit_examples() {
        let f = fit_rates(&[(0.5, 4.0), (0.25, 1.0)]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        let h1 = fit_rates(&[(2f64.powi(-4), 0.100470857), (2f64.powi(-5), 0.0191306895)]).unwrap();
        assert!((h1.slope - 2.39).abs() < 0.01);
        assert!(fit_rates(&[(0.5, 0.0), (0.25, 1.0)]).is_err());
        assert!(fit_rates(&[(0.5, 1.0)]).is_err());
    }

    #[test]
    fn phase_alignment_undoes_rotation() {
        let s = Arc::new(FeSpace::new(Mesh::new(Rect::unit_square(), 6, 6).unwrap(), 1).unwrap());
        let f = Field::interpolate(s.clone(), Flavor::ComplexSpinor, &|x: [f64; 2]| {
            [Complex64::new(x[0], 0.3), Complex64::new(x[1] * x[1], -x[0])]
        });
        let u = f.interior();
        let layout = f.interior_layout();
        let model = FemModel::new(ModelParams::so_bec_reference(), s, Flavor::ComplexSpinor).unwrap();
        let m = model.mass().clone();
        for w in [0.4, -2.0, 3.0] {
            let v = layout.rotate_phase(&u, w);
            let back = phase_align(&layout, &m, &u, &v);
            let d: Vec<f64> = back.iter().zip(&u).map(|(a, b)| a - b).collect();
            assert!(norm_max(&d) < 1e-12, "ω = {w}");
        }
    }

    #[test]
    fn linear_model_fd_is_exact_and_eig_checks_hold() {
        let s = Arc::new(FeSpace::new(Mesh::new(Rect::unit_square(), 8, 8).unwrap(), 1).unwrap());
        let model = FemModel::new(
            ModelParams::linear(identity_coef(), constant(0.0)),
            s,
            Flavor::RealScalar,
        )
        .unwrap();
        let n = model.dim();
        let dense = crate::eigen::dense_eig_oracle(&model.l0().to_dense(), &model.mass().to_dense()).unwrap();
        let u: Vec<f64> = dense.vectors.column(0).iter().cloned().collect();
        let v: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.5).collect();
        let fd = fd_gradient_check(&model, &u, &v, &default_fd_steps());
        assert!(fd.max_relative_mismatch() < 1e-10, "{fd:?}");
        let rep = check_second_order(&model, &u, 2).unwrap();
        // On the orthogonal complement of the ground state the spectrum starts at λ₂.
        assert!((rep.tangent_eigs[0] - dense.values[1]).abs() < 1e-6 * dense.values[1]);
        assert!(rep.phase_mode_distance.is_none());
        let fp = fixed_point_defects(&model, &u, 1.5, 10.0).unwrap();
        assert!(fp.max() < 1e-9, "{fp:?}");
    }

    #[test]
    fn gpe_fd_slope_is_two() {
        let s = Arc::new(FeSpace::new(Mesh::new(Rect::unit_square(), 6, 6).unwrap(), 2).unwrap());
        let model = FemModel::new(
            ModelParams::gpe(identity_coef(), constant(1.0), 50.0),
            s.clone(),
            Flavor::ComplexScalar,
        )
        .unwrap();
        let u = Field::interpolate(s, Flavor::ComplexScalar, &|x: [f64; 2]| {
            [Complex64::new(x[0] * (1.0 - x[0]), x[1] * (1.0 - x[1])), Complex64::new(0.0, 0.0)]
        })
        .normalize_l2()
        .unwrap()
        .interior();
        let v: Vec<f64> = (0..u.len()).map(|i| ((i * 29) % 11) as f64 / 11.0 - 0.5).collect();
        let fd = fd_gradient_check(&model, &u, &v, &default_fd_steps());
        assert!(fd.slope.unwrap() > 1.9, "{fd:?}");
        let fh = fd_hessian_check(&model, &u, &v, &default_fd_steps()).unwrap();
        assert!(fh.slope.unwrap() > 1.9, "{fh:?}");
        assert!(metric_identity_error(&model, &u).unwrap() < 1e-12);
        let phases: Vec<f64> = (0..16).map(|k| k as f64 * 0.4).collect();
        assert!(phase_invariance_error(&model, &u, &phases) < 1e-12);
    }
}
