use std::sync::{Arc, Mutex, OnceLock};

use crate::assembly::{assemble_dx, assemble_mass, assemble_mass_qp, assemble_stiffness};
use crate::blocks::BlockPattern;
use crate::cg::{pcg, solve_with, CgSettings, LinearOperator, PrecondKind, SolveReport};
use crate::chol::{nested_dissection, FactorPrecond, SparseCholesky};
use crate::error::{invalid, Result};
use crate::field::{Field, Flavor, Layout};
use crate::space::{FeSpace, NOT_INTERIOR};
use crate::sparse::SparseSym;
use crate::vecops::NeumaierSum;

use super::{EnergyModel, MetricOperator, ModelKind, ModelParams, QuarticPencil};

/// A model assembled on the interior DOFs of a finite element space.
pub struct FemModel {
    params: ModelParams,
    space: Arc<FeSpace>,
    layout: Layout,
    pattern: BlockPattern,
    l0: SparseSym,
    mass_in_l: Vec<f64>,
    mass: SparseSym,
    h1: SparseSym,
    /// Interaction matrix: ρ_c = Σ_c' β_cc' |u_c'|².
    bmat: [[f64; 2]; 2],
    /// Interior index of local DOF a of element e at `e*nloc + a`.
    local: Vec<u32>,
    ordering: OnceLock<Vec<usize>>,
    /// Factors of α·M + β·𝓛₀ keyed by (α, β) bit patterns.
    factors: Mutex<Vec<((u64, u64), Arc<SparseCholesky>)>>,
    /// Factors of α·M + β·𝓛_v for some earlier linearization point v, reused
    /// as preconditioners until PCG needs more than [`REFRESH_ITERS`] steps.
    metric_factors: Mutex<Vec<((u64, u64), Arc<SparseCholesky>)>>,
}

/// PCG iteration count above which a metric preconditioner is refactored.
const REFRESH_ITERS: usize = 4;

fn antisymmetrize(space: &FeSpace, d: &crate::sparse::Csr) -> Vec<f64> {
    let mut out = vec![0.0; d.nnz()];
    for i in 0..d.nrows() {
        for k in d.row_ptr()[i]..d.row_ptr()[i + 1] {
            let j = d.col_idx()[k] as usize;
            let kt = d.position(j, i).expect("pattern is symmetric");
            out[k] = 0.5 * (d.values()[k] - d.values()[kt]);
        }
    }
    debug_assert_eq!(d.nrows(), space.n_interior());
    out
}

fn so_sign(c: usize) -> f64 {
    if c == 0 {
        1.0
    } else {
        -1.0
    }
}

fn spinor_coupling(np: usize) -> impl Fn(usize, usize) -> bool {
    move |s, t| s / np == t / np || s % np == t % np
}

/// Spin-orbit form Re∫ i k₀ (w̄₁∂₁v₁ − w̄₂∂₁v₂) as a symmetric real operator in
/// spinor layout on the interior DOFs.
pub fn assemble_so_coupling(space: &FeSpace, k0: f64) -> SparseSym {
    let layout = Layout::new(Flavor::ComplexSpinor, space.n_interior());
    let pat = space.pattern();
    let bp = BlockPattern::new(&pat.row_ptr, &pat.col_idx, layout, spinor_coupling(2));
    let mut v = bp.zeros();
    add_so_blocks(&bp, &mut v, &antisymmetrize(space, &assemble_dx(space)), k0);
    bp.to_sparse(v)
}

fn add_so_blocks(bp: &BlockPattern, v: &mut [f64], dt: &[f64], k0: f64) {
    if k0 == 0.0 {
        return;
    }
    for c in 0..2 {
        let s = so_sign(c);
        bp.add_block(v, 2 * c, 2 * c + 1, -s * k0, dt);
        bp.add_block(v, 2 * c + 1, 2 * c, s * k0, dt);
    }
}

impl FemModel {
    pub fn new(params: ModelParams, space: Arc<FeSpace>, flavor: Flavor) -> Result<Self> {
        params.validate()?;
        if !params.accepts_flavor(flavor) {
            return invalid(format!("flavor {flavor:?} does not fit model {:?}", params.kind));
        }
        for e in 0..space.n_elements() {
            for q in 0..space.n_qp() {
                params.check_potentials_at(space.qp_coord(e, q))?;
            }
        }
        let n = space.n_interior();
        let layout = Layout::new(flavor, n);
        let np = flavor.parts();
        let pat = space.pattern();
        let pattern = match params.kind {
            ModelKind::SoBec(_) => {
                BlockPattern::new(&pat.row_ptr, &pat.col_idx, layout, spinor_coupling(np))
            }
            _ => BlockPattern::new(&pat.row_ptr, &pat.col_idx, layout, |s, t| s == t),
        };
        let compact = BlockPattern::new(&pat.row_ptr, &pat.col_idx, layout, |s, t| s == t);

        let diff = params.diffusion.clone();
        let stiff = assemble_stiffness(&space, &move |x| diff(x), 1.0)?;
        let unit_mass = space.mass().values().to_vec();
        let lap = space.stiffness().values().to_vec();
        let pot: Vec<Vec<f64>> = params
            .potentials
            .iter()
            .map(|v| {
                let v = v.clone();
                assemble_mass(&space, &move |x| v(x)).values().to_vec()
            })
            .collect();

        let mut l0 = pattern.zeros();
        let mut mass_in_l = pattern.zeros();
        for s in 0..layout.slots() {
            let c = s / np;
            pattern.add_block(&mut l0, s, s, 1.0, stiff.values());
            pattern.add_block(&mut l0, s, s, 1.0, &pot[c]);
            pattern.add_block(&mut mass_in_l, s, s, 1.0, &unit_mass);
        }
        let mut bmat = [[0.0; 2]; 2];
        match params.kind {
            ModelKind::Linear => {}
            ModelKind::Gpe { beta } => bmat[0][0] = beta,
            ModelKind::SoBec(k) => {
                bmat = [[k.beta11, k.beta12], [k.beta12, k.beta22]];
                for s in 0..layout.slots() {
                    let (c, p) = (s / np, s % np);
                    pattern.add_block(&mut l0, s, s, so_sign(c) * 0.5 * k.delta, &unit_mass);
                    // Rabi coupling between components, same part
                    let t = (1 - c) * np + p;
                    pattern.add_block(&mut l0, s, t, 0.5 * k.omega, &unit_mass);
                }
                let dt = antisymmetrize(&space, &assemble_dx(&space));
                add_so_blocks(&pattern, &mut l0, &dt, k.k0);
            }
        }

        let mut mass_v = compact.zeros();
        let mut h1_v = compact.zeros();
        for s in 0..layout.slots() {
            compact.add_block(&mut mass_v, s, s, 1.0, &unit_mass);
            compact.add_block(&mut h1_v, s, s, 1.0, &unit_mass);
            compact.add_block(&mut h1_v, s, s, 1.0, &lap);
        }
        let nl = space.nloc();
        let mut local = Vec::with_capacity(space.n_elements() * nl);
        for e in 0..space.n_elements() {
            local.extend(space.local_interior(e));
        }

        Ok(Self {
            params,
            l0: pattern.to_sparse(l0),
            mass_in_l,
            mass: compact.to_sparse(mass_v),
            h1: compact.to_sparse(h1_v),
            pattern,
            space,
            layout,
            bmat,
            local,
            ordering: OnceLock::new(),
            factors: Mutex::new(Vec::new()),
            metric_factors: Mutex::new(Vec::new()),
        })
    }

    /// Nested-dissection ordering of the block unknowns.
    fn ordering(&self) -> &[usize] {
        self.ordering.get_or_init(|| {
            let sp = &self.space;
            let coords: Vec<[u32; 2]> = sp
                .interior_dofs()
                .iter()
                .map(|&d| {
                    let l = sp.lattice()[d];
                    [l[0] as u32, l[1] as u32]
                })
                .collect();
            let layout = self.layout;
            nested_dissection(&coords, sp.order() as u32, layout.slots(), |v, g| {
                layout.slot_index(g, v)
            })
        })
    }

    /// Cached sparse Cholesky factor of α·M + β·𝓛₀.
    pub fn shifted_factor(&self, alpha: f64, beta: f64) -> Result<Arc<SparseCholesky>> {
        let key = (alpha.to_bits(), beta.to_bits());
        let mut cache = self.factors.lock().expect("factor cache poisoned");
        if let Some((_, f)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(f.clone());
        }
        let vals: Vec<f64> = self
            .l0
            .values()
            .iter()
            .zip(&self.mass_in_l)
            .map(|(l, m)| beta * l + alpha * m)
            .collect();
        let a = self.l0.with_values_trusted(vals);
        let f = self.factor_in_order(&a)?;
        log::debug!("factored α={alpha} β={beta}: dim {} nnz(L) {}", f.dim(), f.nnz());
        cache.push((key, f.clone()));
        Ok(f)
    }

    fn factor_in_order(&self, a: &SparseSym) -> Result<Arc<SparseCholesky>> {
        Ok(Arc::new(SparseCholesky::factor(a, Some(self.ordering().to_vec()))?))
    }

    fn cached_metric_factor(&self, key: (u64, u64)) -> Option<Arc<SparseCholesky>> {
        let cache = self.metric_factors.lock().expect("factor cache poisoned");
        cache.iter().find(|(k, _)| *k == key).map(|(_, f)| f.clone())
    }

    fn store_metric_factor(&self, key: (u64, u64), f: Arc<SparseCholesky>) {
        let mut cache = self.metric_factors.lock().expect("factor cache poisoned");
        cache.retain(|(k, _)| *k != key);
        cache.push((key, f));
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }
    pub fn flavor(&self) -> Flavor {
        self.layout.flavor
    }

    fn ncomp(&self) -> usize {
        self.layout.flavor.components()
    }

    pub fn has_interaction(&self) -> bool {
        self.bmat.iter().flatten().any(|b| *b != 0.0)
    }

    /// Wraps an interior coefficient vector as a field.
    pub fn field(&self, u: &[f64]) -> Result<Field> {
        Field::from_interior(self.space.clone(), self.flavor(), u)
    }

    /// Values of every slot at every quadrature point: `[(e*nq + q)*slots + s]`.
    pub fn eval_qp(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.layout.dim());
        let sp = &self.space;
        let (nl, nq, ns) = (sp.nloc(), sp.n_qp(), self.layout.slots());
        let mut out = vec![0.0; sp.n_elements() * nq * ns];
        let mut coef = vec![0.0; nl * ns];
        for e in 0..sp.n_elements() {
            for a in 0..nl {
                let idx = self.local[e * nl + a];
                for s in 0..ns {
                    coef[a * ns + s] = if idx == NOT_INTERIOR {
                        0.0
                    } else {
                        u[self.layout.slot_index(s, idx as usize)]
                    };
                }
            }
            for q in 0..nq {
                let phi = sp.phi(q);
                let o = &mut out[(e * nq + q) * ns..(e * nq + q + 1) * ns];
                for a in 0..nl {
                    for s in 0..ns {
                        o[s] += phi[a] * coef[a * ns + s];
                    }
                }
            }
        }
        out
    }

    fn densities(&self, vals: &[f64]) -> [f64; 2] {
        let np = self.layout.flavor.parts();
        let mut d = [0.0; 2];
        for (s, v) in vals.iter().enumerate() {
            d[s / np] += v * v;
        }
        d
    }

    fn rho(&self, d: [f64; 2]) -> [f64; 2] {
        let b = &self.bmat;
        [b[0][0] * d[0] + b[0][1] * d[1], b[1][0] * d[0] + b[1][1] * d[1]]
    }

    fn quartic_density(&self, d: [f64; 2]) -> f64 {
        let b = &self.bmat;
        0.25 * (b[0][0] * d[0] * d[0] + 2.0 * b[0][1] * d[0] * d[1] + b[1][1] * d[1] * d[1])
    }

    /// Q from quadrature-point values.
    pub fn quartic_qp(&self, uq: &[f64]) -> f64 {
        if !self.has_interaction() {
            return 0.0;
        }
        let sp = &self.space;
        let (nq, ns) = (sp.n_qp(), self.layout.slots());
        let mut acc = NeumaierSum::default();
        for e in 0..sp.n_elements() {
            let mut s_e = 0.0;
            for q in 0..nq {
                let k = (e * nq + q) * ns;
                let d = self.densities(&uq[k..k + ns]);
                s_e += sp.rule().weights[q] * self.quartic_density(d);
            }
            acc.add(s_e * sp.geometry(e).area);
        }
        acc.value()
    }

    /// Coefficients k of Q(a·u + b·w) = Σ_j k_j a^{4−j} b^j from quadrature values.
    pub fn quartic_pencil_coeffs(&self, uq: &[f64], wq: &[f64]) -> [f64; 5] {
        let sp = &self.space;
        let (nq, ns, np) = (sp.n_qp(), self.layout.slots(), self.layout.flavor.parts());
        let nc = self.ncomp();
        let mut acc: [NeumaierSum; 5] = Default::default();
        for e in 0..sp.n_elements() {
            let mut s_e = [0.0; 5];
            for q in 0..nq {
                let k = (e * nq + q) * ns;
                // d_c(a, b) = A_c a² + B_c ab + C_c b²
                let mut abc = [[0.0; 3]; 2];
                for c in 0..nc {
                    for p in 0..np {
                        let (x, y) = (uq[k + c * np + p], wq[k + c * np + p]);
                        abc[c][0] += x * x;
                        abc[c][1] += 2.0 * x * y;
                        abc[c][2] += y * y;
                    }
                }
                let wq_ = 0.25 * sp.rule().weights[q];
                for c in 0..nc {
                    for d in 0..nc {
                        let bw = wq_ * self.bmat[c][d];
                        if bw == 0.0 {
                            continue;
                        }
                        let (x, y) = (abc[c], abc[d]);
                        s_e[0] += bw * x[0] * y[0];
                        s_e[1] += bw * (x[0] * y[1] + x[1] * y[0]);
                        s_e[2] += bw * (x[0] * y[2] + x[1] * y[1] + x[2] * y[0]);
                        s_e[3] += bw * (x[1] * y[2] + x[2] * y[1]);
                        s_e[4] += bw * x[2] * y[2];
                    }
                }
            }
            let area = sp.geometry(e).area;
            for j in 0..5 {
                acc[j].add(s_e[j] * area);
            }
        }
        acc.map(|a| a.value())
    }

    /// Per-component nonlinear weights ρ_c at quadrature points as scalar mass values.
    pub fn nonlinear_scalar_values(&self, uq: &[f64]) -> Vec<Vec<f64>> {
        let sp = &self.space;
        let (nq, ns) = (sp.n_qp(), self.layout.slots());
        let npts = sp.n_elements() * nq;
        (0..self.ncomp())
            .map(|c| {
                let w: Vec<f64> = (0..npts)
                    .map(|k| self.rho(self.densities(&uq[k * ns..(k + 1) * ns]))[c])
                    .collect();
                assemble_mass_qp(sp, &w)
            })
            .collect()
    }

    /// Dual vector of a per-quadrature-point, per-slot integrand f: Σ_q w f_s(q) φ_a(q).
    fn dual_from_qp(&self, f: impl Fn(usize, &mut [f64])) -> Vec<f64> {
        let sp = &self.space;
        let (nl, nq, ns) = (sp.nloc(), sp.n_qp(), self.layout.slots());
        let mut out = vec![0.0; self.layout.dim()];
        let mut fv = vec![0.0; ns];
        let mut loc = vec![0.0; nl * ns];
        for e in 0..sp.n_elements() {
            loc.fill(0.0);
            for q in 0..nq {
                f(e * nq + q, &mut fv);
                let w = sp.qp_weight(e, q);
                let phi = sp.phi(q);
                for a in 0..nl {
                    let wa = w * phi[a];
                    for s in 0..ns {
                        loc[a * ns + s] += wa * fv[s];
                    }
                }
            }
            for a in 0..nl {
                let idx = self.local[e * nl + a];
                if idx == NOT_INTERIOR {
                    continue;
                }
                for s in 0..ns {
                    out[self.layout.slot_index(s, idx as usize)] += loc[a * ns + s];
                }
            }
        }
        out
    }

    /// N(u)u from quadrature-point values of u.
    pub fn nonlinear_dual(&self, uq: &[f64]) -> Vec<f64> {
        if !self.has_interaction() {
            return vec![0.0; self.layout.dim()];
        }
        let ns = self.layout.slots();
        let np = self.layout.flavor.parts();
        self.dual_from_qp(|k, fv| {
            let vals = &uq[k * ns..(k + 1) * ns];
            let rho = self.rho(self.densities(vals));
            for s in 0..ns {
                fv[s] = rho[s / np] * vals[s];
            }
        })
    }

    /// The part of E″(u)v beyond 𝓛_u v: component c gets 2 Σ_c' β_cc' Re(u_c' v̄_c') u_c.
    pub fn hessian_correction(&self, uq: &[f64], v: &[f64]) -> Vec<f64> {
        if !self.has_interaction() {
            return vec![0.0; self.layout.dim()];
        }
        let vq = self.eval_qp(v);
        let ns = self.layout.slots();
        let np = self.layout.flavor.parts();
        self.dual_from_qp(|k, fv| {
            let uv = &uq[k * ns..(k + 1) * ns];
            let vv = &vq[k * ns..(k + 1) * ns];
            let mut sc = [0.0; 2];
            for s in 0..ns {
                sc[s / np] += uv[s] * vv[s];
            }
            let f = self.rho(sc);
            for s in 0..ns {
                fv[s] = 2.0 * f[s / np] * uv[s];
            }
        })
    }

    fn hessian_correction_diag(&self, uq: &[f64]) -> Vec<f64> {
        let sp = &self.space;
        let (nl, nq, ns) = (sp.nloc(), sp.n_qp(), self.layout.slots());
        let np = self.layout.flavor.parts();
        let mut out = vec![0.0; self.layout.dim()];
        for e in 0..sp.n_elements() {
            for q in 0..nq {
                let w = sp.qp_weight(e, q);
                let phi = sp.phi(q);
                let vals = &uq[(e * nq + q) * ns..(e * nq + q + 1) * ns];
                for a in 0..nl {
                    let idx = self.local[e * nl + a];
                    if idx == NOT_INTERIOR {
                        continue;
                    }
                    for s in 0..ns {
                        let c = s / np;
                        out[self.layout.slot_index(s, idx as usize)] +=
                            w * 2.0 * self.bmat[c][c] * vals[s] * vals[s] * phi[a] * phi[a];
                    }
                }
            }
        }
        out
    }

    /// Assembled metric 𝓛_u (u = 0 gives 𝓛₀).
    pub fn assemble_metric(&self, u: &[f64]) -> SparseSym {
        if !self.has_interaction() {
            return self.l0.clone();
        }
        let uq = self.eval_qp(u);
        self.metric_from_qp(&uq)
    }

    fn metric_from_qp(&self, uq: &[f64]) -> SparseSym {
        let mut v = self.l0.values().to_vec();
        let np = self.layout.flavor.parts();
        for (c, nv) in self.nonlinear_scalar_values(uq).iter().enumerate() {
            for p in 0..np {
                let s = c * np + p;
                self.pattern.add_block(&mut v, s, s, 1.0, nv);
            }
        }
        self.pattern.to_sparse(v)
    }

    /// Mass values on the metric pattern (for shifted solves).
    pub(crate) fn mass_in_metric_pattern(&self) -> &[f64] {
        &self.mass_in_l
    }
}

impl EnergyModel for FemModel {
    fn layout(&self) -> Layout {
        self.layout
    }
    fn mass(&self) -> &SparseSym {
        &self.mass
    }
    fn h1(&self) -> &SparseSym {
        &self.h1
    }
    fn l0(&self) -> &SparseSym {
        &self.l0
    }

    fn quartic(&self, u: &[f64]) -> f64 {
        if !self.has_interaction() {
            return 0.0;
        }
        self.quartic_qp(&self.eval_qp(u))
    }

    fn quartic_pencil<'a>(&'a self, u: &[f64], w: &[f64]) -> QuarticPencil<'a> {
        if !self.has_interaction() {
            return Box::new(|_, _| 0.0);
        }
        let k = self.quartic_pencil_coeffs(&self.eval_qp(u), &self.eval_qp(w));
        Box::new(move |a, b| {
            let (a2, b2) = (a * a, b * b);
            k[0] * a2 * a2 + k[1] * a2 * a * b + k[2] * a2 * b2 + k[3] * a * b2 * b + k[4] * b2 * b2
        })
    }

    fn nonlinear_gradient(&self, u: &[f64]) -> Vec<f64> {
        if !self.has_interaction() {
            return vec![0.0; self.layout.dim()];
        }
        self.nonlinear_dual(&self.eval_qp(u))
    }

    fn metric<'a>(&'a self, u: &[f64]) -> Result<Box<dyn MetricOperator + 'a>> {
        Ok(Box::new(FemMetric {
            model: self,
            lu: self.assemble_metric(u),
        }))
    }

    fn hessian<'a>(&'a self, u: &[f64]) -> Result<Box<dyn LinearOperator + 'a>> {
        let uq = self.eval_qp(u);
        let lu = if self.has_interaction() {
            self.metric_from_qp(&uq)
        } else {
            self.l0.clone()
        };
        let mut diag = lu.csr().diagonal();
        if self.has_interaction() {
            for (d, c) in diag.iter_mut().zip(self.hessian_correction_diag(&uq)) {
                *d += c;
            }
        }
        Ok(Box::new(FemHessian {
            model: self,
            lu,
            uq,
            diag,
        }))
    }
}

/// Assembled 𝓛_u of a [`FemModel`].
pub struct FemMetric<'a> {
    model: &'a FemModel,
    lu: SparseSym,
}

impl FemMetric<'_> {
    pub fn matrix(&self) -> &SparseSym {
        &self.lu
    }
}

impl LinearOperator for FemMetric<'_> {
    fn dim(&self) -> usize {
        self.lu.dim()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.lu.matvec_into(x, y)
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.lu.csr().diagonal())
    }
}

impl MetricOperator for FemMetric<'_> {
    fn solve_shifted(
        &self,
        alpha: f64,
        beta: f64,
        b: &[f64],
        x0: Option<&[f64]>,
        settings: &CgSettings,
    ) -> Result<(Vec<f64>, SolveReport)> {
        let shifted;
        let a = if alpha == 0.0 && beta == 1.0 {
            &self.lu
        } else {
            let vals: Vec<f64> = self
                .lu
                .values()
                .iter()
                .zip(self.model.mass_in_metric_pattern())
                .map(|(l, m)| beta * l + alpha * m)
                .collect();
            shifted = self.lu.with_values_trusted(vals);
            &shifted
        };
        if settings.precond == PrecondKind::Factorized {
            let key = (alpha.to_bits(), beta.to_bits());
            let f = match self.model.cached_metric_factor(key) {
                Some(f) => f,
                None => {
                    let f = self.model.factor_in_order(a)?;
                    self.model.store_metric_factor(key, f.clone());
                    f
                }
            };
            let max_iter = settings.max_iter.unwrap_or(10 * a.dim());
            let prec = FactorPrecond {
                factor: &f,
                scale: 1.0,
            };
            let out = pcg(a, &prec, b, x0, settings.tol, max_iter)?;
            if out.1.iterations > REFRESH_ITERS {
                self.model.store_metric_factor(key, self.model.factor_in_order(a)?);
            }
            return Ok(out);
        }
        solve_with(a, b, x0, settings)
    }
}

/// E″(u) = 𝓛_u + quadrature correction, applied matrix-free.
pub struct FemHessian<'a> {
    model: &'a FemModel,
    lu: SparseSym,
    uq: Vec<f64>,
    diag: Vec<f64>,
}

impl LinearOperator for FemHessian<'_> {
    fn dim(&self) -> usize {
        self.lu.dim()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.lu.matvec_into(x, y);
        if self.model.has_interaction() {
            let c = self.model.hessian_correction(&self.uq, x);
            for (yi, ci) in y.iter_mut().zip(c) {
                *yi += ci;
            }
        }
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.diag.clone())
    }
}
