//! Coefficient fields over a finite element space.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::space::FeSpace;
use crate::sparse::SparseSym;
use crate::vecops::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    RealScalar,
    ComplexScalar,
    ComplexSpinor,
}

impl Flavor {
    pub fn components(self) -> usize {
        match self {
            Flavor::ComplexSpinor => 2,
            _ => 1,
        }
    }

    /// Real parts per complex value: 1 for real, 2 for (re, im).
    pub fn parts(self) -> usize {
        match self {
            Flavor::RealScalar => 1,
            _ => 2,
        }
    }

    pub fn multiplicity(self) -> usize {
        self.components() * self.parts()
    }

    pub fn is_complex(self) -> bool {
        self.parts() == 2
    }
}

/// Real coefficient layout: component-major, (re, im) interleaved per DOF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub flavor: Flavor,
    /// Scalar DOF count.
    pub n: usize,
}

impl Layout {
    pub fn new(flavor: Flavor, n: usize) -> Self {
        Self { flavor, n }
    }

    pub fn dim(&self) -> usize {
        self.flavor.multiplicity() * self.n
    }

    pub fn slots(&self) -> usize {
        self.flavor.multiplicity()
    }

    pub fn index(&self, c: usize, i: usize, p: usize) -> usize {
        let np = self.flavor.parts();
        c * np * self.n + np * i + p
    }

    /// Slot s = c·parts + p.
    pub fn slot_index(&self, s: usize, i: usize) -> usize {
        let np = self.flavor.parts();
        self.index(s / np, i, s % np)
    }

    pub fn value(&self, u: &[f64], c: usize, i: usize) -> Complex64 {
        let re = u[self.index(c, i, 0)];
        let im = if self.flavor.is_complex() {
            u[self.index(c, i, 1)]
        } else {
            0.0
        };
        Complex64::new(re, im)
    }

    /// Multiplies every complex value by e^{iω} (identity for real flavors when ω ∈ {0}).
    pub fn rotate_phase(&self, u: &[f64], omega: f64) -> Vec<f64> {
        assert!(self.flavor.is_complex(), "phase rotation needs a complex flavor");
        let (s, c) = omega.sin_cos();
        let mut out = u.to_vec();
        for comp in 0..self.flavor.components() {
            for i in 0..self.n {
                let (a, b) = (self.index(comp, i, 0), self.index(comp, i, 1));
                out[a] = c * u[a] - s * u[b];
                out[b] = s * u[a] + c * u[b];
            }
        }
        out
    }

    /// Multiplication by i.
    pub fn times_i(&self, u: &[f64]) -> Vec<f64> {
        self.rotate_phase(u, std::f64::consts::FRAC_PI_2)
    }

    /// Expands a scalar vector into the block layout: one copy per slot.
    pub fn scatter_slot(&self, s: usize, scalar: &[f64], out: &mut [f64]) {
        for (i, v) in scalar.iter().enumerate() {
            out[self.slot_index(s, i)] = *v;
        }
    }

    pub fn gather_slot(&self, s: usize, u: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| u[self.slot_index(s, i)]).collect()
    }
}

/// Applies a scalar operator slot-wise to a block vector.
pub fn apply_slotwise(layout: &Layout, a: &crate::sparse::Csr, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layout.slots() * a.nrows()];
    let out_layout = Layout::new(layout.flavor, a.nrows());
    for s in 0..layout.slots() {
        let v = a.matvec(&layout.gather_slot(s, u));
        out_layout.scatter_slot(s, &v, &mut out);
    }
    out
}

/// A coefficient vector on all DOFs of a space; boundary DOFs are exactly zero.
#[derive(Debug, Clone)]
pub struct Field {
    space: Arc<FeSpace>,
    flavor: Flavor,
    coeffs: Vec<f64>,
}

impl Field {
    pub fn zeros(space: Arc<FeSpace>, flavor: Flavor) -> Self {
        let n = space.ndof() * flavor.multiplicity();
        Self {
            space,
            flavor,
            coeffs: vec![0.0; n],
        }
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }
    pub fn flavor(&self) -> Flavor {
        self.flavor
    }
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
    pub fn full_layout(&self) -> Layout {
        Layout::new(self.flavor, self.space.ndof())
    }
    pub fn interior_layout(&self) -> Layout {
        Layout::new(self.flavor, self.space.n_interior())
    }

    /// Builds from interior coefficients (boundary entries set to zero).
    pub fn from_interior(space: Arc<FeSpace>, flavor: Flavor, interior: &[f64]) -> Result<Self> {
        let il = Layout::new(flavor, space.n_interior());
        if interior.len() != il.dim() {
            return invalid(format!(
                "interior vector has length {}, expected {}",
                interior.len(),
                il.dim()
            ));
        }
        let mut f = Self::zeros(space, flavor);
        let fl = f.full_layout();
        let np = flavor.parts();
        for c in 0..flavor.components() {
            for (k, &d) in f.space.interior_dofs().iter().enumerate() {
                for p in 0..np {
                    f.coeffs[fl.index(c, d, p)] = interior[il.index(c, k, p)];
                }
            }
        }
        Ok(f)
    }

    pub fn interior(&self) -> Vec<f64> {
        let il = self.interior_layout();
        let fl = self.full_layout();
        let mut out = vec![0.0; il.dim()];
        let np = self.flavor.parts();
        for c in 0..self.flavor.components() {
            for (k, &d) in self.space.interior_dofs().iter().enumerate() {
                for p in 0..np {
                    out[il.index(c, k, p)] = self.coeffs[fl.index(c, d, p)];
                }
            }
        }
        out
    }

    /// Nodal interpolant of per-component complex functions; boundary DOFs zeroed.
    /// For `RealScalar` the imaginary part is ignored.
    pub fn interpolate(
        space: Arc<FeSpace>,
        flavor: Flavor,
        f: &dyn Fn([f64; 2]) -> [Complex64; 2],
    ) -> Self {
        let mut out = Self::zeros(space, flavor);
        let fl = out.full_layout();
        for d in 0..out.space.ndof() {
            if out.space.is_boundary(d) {
                continue;
            }
            let v = f(out.space.dof_coords()[d]);
            for c in 0..flavor.components() {
                out.coeffs[fl.index(c, d, 0)] = v[c].re;
                if flavor.is_complex() {
                    out.coeffs[fl.index(c, d, 1)] = v[c].im;
                }
            }
        }
        out
    }

    pub fn interpolate_real(space: Arc<FeSpace>, f: &dyn Fn([f64; 2]) -> f64) -> Self {
        Self::interpolate(space, Flavor::RealScalar, &|x| {
            [Complex64::new(f(x), 0.0), Complex64::new(0.0, 0.0)]
        })
    }

    /// L² norm through the interior mass matrix, summed over components.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(self.space.mass(), &self.interior_layout(), &self.interior())
    }

    /// Returns field/‖field‖_{L²}.
    pub fn normalize_l2(&self) -> Result<Self> {
        let nrm = self.l2_norm();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::InvalidInput(
                "cannot normalize a zero (or non-finite) field".into(),
            ));
        }
        let mut out = self.clone();
        for v in &mut out.coeffs {
            *v /= nrm;
        }
        Ok(out)
    }

    pub fn value(&self, c: usize, dof: usize) -> Complex64 {
        self.full_layout().value(&self.coeffs, c, dof)
    }

    /// |u_c|² at every DOF.
    pub fn density(&self, c: usize) -> Vec<f64> {
        (0..self.space.ndof()).map(|d| self.value(c, d).norm_sqr()).collect()
    }
}

/// Squared L² norm of a block vector using the scalar mass matrix per slot.
pub fn l2_norm_sq(mass: &SparseSym, layout: &Layout, u: &[f64]) -> f64 {
    (0..layout.slots())
        .map(|s| {
            let v = layout.gather_slot(s, u);
            dot(&mass.matvec(&v), &v)
        })
        .sum()
}

pub fn l2_norm(mass: &SparseSym, layout: &Layout, u: &[f64]) -> f64 {
    l2_norm_sq(mass, layout, u).sqrt()
}
