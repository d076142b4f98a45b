//! Energy models on real coefficient vectors: E(u) = ½⟨𝓛₀u,u⟩ + Q(u) with Q
//! homogeneous quartic, 𝓛_u = 𝓛₀ + N(u) and E′(u) = 𝓛_u u.

mod fem;
mod params;

pub use fem::{assemble_so_coupling, FemHessian, FemMetric, FemModel};
pub use params::{
    constant, identity_coef, MatrixCoef, ModelKind, ModelParams, ScalarCoef, SoBecConstants,
};

use serde::Serialize;

use crate::cg::{CgSettings, LinearOperator, SolveReport};
use crate::eigen::dual_norm;
use crate::error::{Error, Result};
use crate::field::Layout;
use crate::sparse::SparseSym;
use crate::vecops::{axpy, dot, dot_compensated, norm_max};

/// The metric operator 𝓛_u at a fixed linearization point.
pub trait MetricOperator: LinearOperator {
    /// Solves (α·M + β·𝓛_u) x = b.
    fn solve_shifted(
        &self,
        alpha: f64,
        beta: f64,
        b: &[f64],
        x0: Option<&[f64]>,
        settings: &CgSettings,
    ) -> Result<(Vec<f64>, SolveReport)>;
}

/// Quartic part evaluated along a two-dimensional span: (a, b) ↦ Q(a·u + b·w).
pub type QuarticPencil<'a> = Box<dyn Fn(f64, f64) -> f64 + Sync + 'a>;

/// Common interface of the fine finite element models and the reduced (LOD) models.
pub trait EnergyModel: Sync {
    fn layout(&self) -> Layout;

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// L² Gram matrix in the model's coefficient layout.
    fn mass(&self) -> &SparseSym;

    /// H¹ Gram matrix (∫∇u·∇v + uv per slot).
    fn h1(&self) -> &SparseSym;

    /// The u-independent part of the metric, 𝓛₀.
    fn l0(&self) -> &SparseSym;

    fn quartic(&self, u: &[f64]) -> f64;

    fn quartic_pencil<'a>(&'a self, u: &[f64], w: &[f64]) -> QuarticPencil<'a>;

    /// N(u)u, so that E′(u) = 𝓛₀u + N(u)u.
    fn nonlinear_gradient(&self, u: &[f64]) -> Vec<f64>;

    fn metric<'a>(&'a self, u: &[f64]) -> Result<Box<dyn MetricOperator + 'a>>;

    /// E″(u) as an operator.
    fn hessian<'a>(&'a self, u: &[f64]) -> Result<Box<dyn LinearOperator + 'a>>;

    fn energy(&self, u: &[f64]) -> f64 {
        0.5 * dot_compensated(&self.l0().matvec(u), u) + self.quartic(u)
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut g = self.l0().matvec(u);
        axpy(1.0, &self.nonlinear_gradient(u), &mut g);
        g
    }

    fn hessian_apply(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hessian(u)?.apply(v))
    }

    fn mass_norm(&self, u: &[f64]) -> f64 {
        dot(&self.mass().matvec(u), u).max(0.0).sqrt()
    }

    fn h1_norm(&self, u: &[f64]) -> f64 {
        dot(&self.h1().matvec(u), u).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EigenResidual {
    pub lambda: f64,
    /// Coefficient max-norm of E′(u) − λMu.
    pub residual_max: f64,
    /// M⁻¹-weighted norm of the same dual vector.
    pub residual_dual: f64,
}

/// λ = ⟨E′(u),u⟩ and the residual of E′(u) − λMu for normalized u.
pub fn eigen_residual(model: &dyn EnergyModel, u: &[f64]) -> Result<EigenResidual> {
    let nrm = model.mass_norm(u);
    if (nrm - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "eigen residual needs ‖u‖_L² = 1, got {nrm}"
        )));
    }
    let g = model.gradient(u);
    let lambda = dot_compensated(&g, u);
    let mu = model.mass().matvec(u);
    let r: Vec<f64> = g.iter().zip(&mu).map(|(a, b)| a - lambda * b).collect();
    Ok(EigenResidual {
        lambda,
        residual_max: norm_max(&r),
        residual_dual: dual_norm(model.mass(), &r)?,
    })
}
