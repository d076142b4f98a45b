use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::Flavor;

pub type ScalarCoef = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
pub type MatrixCoef = Arc<dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync>;

/// Interaction and coupling constants of the spin-orbit-coupled condensate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoBecConstants {
    pub beta11: f64,
    pub beta12: f64,
    pub beta22: f64,
    pub delta: f64,
    pub omega: f64,
    pub k0: f64,
}

impl SoBecConstants {
    /// β₁₁=10, β₁₂=β₂₂=9, k₀=10, Ω=50, δ=0.
    pub fn reference() -> Self {
        Self {
            beta11: 10.0,
            beta12: 9.0,
            beta22: 9.0,
            delta: 0.0,
            omega: 50.0,
            k0: 10.0,
        }
    }

    /// Smallest potential allowed by the admissibility condition, (|δ|+|Ω|+2k₀²)/2.
    pub fn admissible_shift(&self) -> f64 {
        0.5 * (self.delta.abs() + self.omega.abs() + 2.0 * self.k0 * self.k0)
    }

    /// Potential used in the experiments, (Ω+δ+2k₀²)/2.
    pub fn experiment_potential(&self) -> f64 {
        0.5 * (self.omega + self.delta + 2.0 * self.k0 * self.k0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Linear,
    Gpe { beta: f64 },
    SoBec(SoBecConstants),
}

/// Physical data of one energy model.
#[derive(Clone)]
pub struct ModelParams {
    pub kind: ModelKind,
    /// Diffusion coefficient A (fixed to ½·I for the spin-orbit model).
    pub diffusion: MatrixCoef,
    /// One potential per component.
    pub potentials: Vec<ScalarCoef>,
    /// When false, a violated admissibility condition only logs a warning.
    pub strict_admissibility: bool,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("kind", &self.kind)
            .field("potentials", &self.potentials.len())
            .field("strict_admissibility", &self.strict_admissibility)
            .finish()
    }
}

pub fn identity_coef() -> MatrixCoef {
    Arc::new(|_| [[1.0, 0.0], [0.0, 1.0]])
}

pub fn constant(v: f64) -> ScalarCoef {
    Arc::new(move |_| v)
}

impl ModelParams {
    pub fn linear(diffusion: MatrixCoef, potential: ScalarCoef) -> Self {
        Self {
            kind: ModelKind::Linear,
            diffusion,
            potentials: vec![potential],
            strict_admissibility: true,
        }
    }

    pub fn gpe(diffusion: MatrixCoef, potential: ScalarCoef, beta: f64) -> Self {
        Self {
            kind: ModelKind::Gpe { beta },
            diffusion,
            potentials: vec![potential],
            strict_admissibility: true,
        }
    }

    pub fn so_bec(c: SoBecConstants, v1: ScalarCoef, v2: ScalarCoef) -> Self {
        Self {
            kind: ModelKind::SoBec(c),
            diffusion: Arc::new(|_| [[0.5, 0.0], [0.0, 0.5]]),
            potentials: vec![v1, v2],
            strict_admissibility: true,
        }
    }

    /// The experiment setup: reference constants and V_j = (Ω+δ+2k₀²)/2.
    pub fn so_bec_reference() -> Self {
        let c = SoBecConstants::reference();
        let v = c.experiment_potential();
        Self::so_bec(c, constant(v), constant(v))
    }

    pub fn components(&self) -> usize {
        match self.kind {
            ModelKind::SoBec(_) => 2,
            _ => 1,
        }
    }

    /// Default flavor: real for linear/GPE, spinor for the coupled model.
    pub fn default_flavor(&self) -> Flavor {
        match self.kind {
            ModelKind::SoBec(_) => Flavor::ComplexSpinor,
            _ => Flavor::RealScalar,
        }
    }

    pub fn accepts_flavor(&self, flavor: Flavor) -> bool {
        match self.kind {
            ModelKind::SoBec(_) => flavor == Flavor::ComplexSpinor,
            _ => flavor != Flavor::ComplexSpinor,
        }
    }

    /// Same model with all interaction strengths set to zero.
    pub fn without_interaction(&self) -> Self {
        let mut p = self.clone();
        p.kind = match self.kind {
            ModelKind::Linear => ModelKind::Linear,
            ModelKind::Gpe { .. } => ModelKind::Gpe { beta: 0.0 },
            ModelKind::SoBec(c) => ModelKind::SoBec(SoBecConstants {
                beta11: 0.0,
                beta12: 0.0,
                beta22: 0.0,
                ..c
            }),
        };
        p
    }

    /// Checks the sign conditions that do not need a mesh.
    pub fn validate(&self) -> Result<()> {
        if self.potentials.len() != self.components() {
            return Err(Error::ModelValidation(format!(
                "expected {} potentials, got {}",
                self.components(),
                self.potentials.len()
            )));
        }
        let bad = |name: &str, v: f64| {
            Err(Error::ModelValidation(format!(
                "{name} = {v} must be finite and nonnegative (repulsive interactions)"
            )))
        };
        match self.kind {
            ModelKind::Linear => {}
            ModelKind::Gpe { beta } => {
                if !(beta >= 0.0) || !beta.is_finite() {
                    return bad("beta", beta);
                }
            }
            ModelKind::SoBec(c) => {
                for (n, v) in [("beta11", c.beta11), ("beta12", c.beta12), ("beta22", c.beta22)] {
                    if !(v >= 0.0) || !v.is_finite() {
                        return bad(n, v);
                    }
                }
                for (n, v) in [("delta", c.delta), ("omega", c.omega), ("k0", c.k0)] {
                    if !v.is_finite() {
                        return Err(Error::ModelValidation(format!("{n} must be finite")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pointwise potential checks at a quadrature point.
    pub(crate) fn check_potentials_at(&self, x: [f64; 2]) -> Result<()> {
        let shift = match self.kind {
            ModelKind::SoBec(c) => c.admissible_shift(),
            _ => 0.0,
        };
        for (j, v) in self.potentials.iter().enumerate() {
            let val = v(x);
            if !val.is_finite() || val < 0.0 {
                return Err(Error::ModelValidation(format!(
                    "potential V_{} = {val} at {x:?} must be finite and nonnegative",
                    j + 1
                )));
            }
            let margin = val - shift;
            if margin < -1e-12 * shift.max(1.0) {
                let msg = format!(
                    "admissibility V_{}(x) − (|δ|+|Ω|+2k₀²)/2 = {margin:e} < 0 at {x:?}",
                    j + 1
                );
                if self.strict_admissibility {
                    return Err(Error::ModelValidation(msg));
                }
                log::warn!("{msg}");
                return Ok(());
            }
        }
        Ok(())
    }
}
