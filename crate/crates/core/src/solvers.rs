//! Ground-state iterations on the L²-sphere: the metric-driven Riemannian
//! gradient method (MDRGM) with golden-section step search, inverse
//! iteration (τ = 1) and the gradient flow with discrete normalization (GFDN).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cg::{CgSettings, PrecondKind, SolveReport};
use crate::error::{invalid, Error, Result};
use crate::models::{eigen_residual, EigenResidual, EnergyModel, MetricOperator};
use crate::vecops::{dot, dot_compensated, lincomb, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Mdrgm,
    InverseIteration,
    Gfdn,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Mdrgm => "MDRGM",
            Scheme::InverseIteration => "InvIter",
            Scheme::Gfdn => "GFDN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    Fixed(f64),
    GoldenSection { lo: f64, hi: f64, tol: f64 },
}

impl TauPolicy {
    pub fn golden_default() -> Self {
        TauPolicy::GoldenSection {
            lo: 0.05,
            hi: 2.0,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub tau: TauPolicy,
    pub stop_energy_tol: f64,
    pub max_outer: usize,
    pub cg: CgSettings,
    /// Allowed energy increase per step before a hard error.
    pub energy_slack: f64,
    pub warm_start: bool,
}

impl SolverConfig {
    pub fn new(scheme: Scheme) -> Self {
        let tau = match scheme {
            Scheme::Mdrgm => TauPolicy::golden_default(),
            Scheme::InverseIteration | Scheme::Gfdn => TauPolicy::Fixed(1.0),
        };
        Self {
            scheme,
            tau,
            stop_energy_tol: 1e-11,
            max_outer: 20_000,
            cg: CgSettings {
                precond: PrecondKind::Factorized,
                ..CgSettings::default()
            },
            energy_slack: 1e-13,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.scheme, self.tau) {
            (Scheme::Gfdn, TauPolicy::Fixed(t)) if t > 0.0 && t.is_finite() => {}
            (Scheme::Gfdn, _) => return invalid("GFDN needs a fixed positive τ"),
            (Scheme::InverseIteration, TauPolicy::Fixed(t)) if t == 1.0 => {}
            (Scheme::InverseIteration, _) => return invalid("inverse iteration uses τ = 1"),
            (Scheme::Mdrgm, TauPolicy::Fixed(t)) if t > 0.0 && t < 2.0 => {}
            (Scheme::Mdrgm, TauPolicy::GoldenSection { lo, hi, tol })
                if lo > 0.0 && hi <= 2.0 && lo < hi && tol > 0.0 => {}
            (Scheme::Mdrgm, p) => return invalid(format!("inadmissible step policy {p:?}")),
        }
        if !(self.stop_energy_tol > 0.0) {
            return invalid("stop_energy_tol must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub n: usize,
    pub energy: f64,
    /// γ_{uⁿ} for MDRGM/inverse iteration; ⟨E′(uⁿ),uⁿ⟩ for GFDN.
    pub lambda: f64,
    pub tau: f64,
    pub step_h1: f64,
    pub mass_prel: f64,
    pub cg_iters: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub const CSV_HEADER: &'static str = "n,energy,lambda,tau,step_h1,mass_prel,cg_iters";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                r.n, r.energy, r.lambda, r.tau, r.step_h1, r.mass_prel, r.cg_iters
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Steps (excluding the initial record).
    pub fn steps(&self) -> &[IterationRecord] {
        if self.records.is_empty() {
            &self.records
        } else {
            &self.records[1..]
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundState {
    pub u: Vec<f64>,
    /// ⟨E′(u),u⟩ at the final iterate.
    pub lambda: f64,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// γ at the last step (MDRGM/inverse iteration), if computed.
    pub last_gamma: Option<f64>,
    pub residual: EigenResidual,
    pub trace: IterationTrace,
}

/// Metric direction w = 𝓛_u⁻¹Mu with γ = 1/(w, u)_M.
pub struct Direction {
    pub w: Vec<f64>,
    pub gamma: f64,
    pub report: SolveReport,
}

pub fn metric_direction(
    metric: &dyn MetricOperator,
    mu: &[f64],
    u: &[f64],
    x0: Option<&[f64]>,
    cg: &CgSettings,
) -> Result<Direction> {
    let (w, report) = metric.solve_shifted(0.0, 1.0, mu, x0, cg)?;
    if !report.converged {
        return Err(Error::SolveFailed {
            context: "metric solve 𝓛_u w = M u".into(),
            report,
        });
    }
    let wu = dot_compensated(&w, mu);
    if !(wu > 0.0) {
        return Err(Error::Indefinite(format!("(𝓛_u⁻¹u, u) = {wu:e} is not positive")));
    }
    let _ = u;
    Ok(Direction {
        w,
        gamma: 1.0 / wu,
        report,
    })
}

/// E(normalize(a·u + b·w)) evaluated from precomputed scalars.
pub struct EnergyPencil<'a> {
    l_uu: f64,
    l_uw: f64,
    l_ww: f64,
    m_uu: f64,
    m_uw: f64,
    m_ww: f64,
    quartic: crate::models::QuarticPencil<'a>,
}

impl<'a> EnergyPencil<'a> {
    pub fn new(model: &'a dyn EnergyModel, u: &[f64], w: &[f64]) -> Self {
        let lu = model.l0().matvec(u);
        let lw = model.l0().matvec(w);
        let mu = model.mass().matvec(u);
        let mw = model.mass().matvec(w);
        Self {
            l_uu: dot_compensated(&lu, u),
            l_uw: 0.5 * (dot_compensated(&lu, w) + dot_compensated(&lw, u)),
            l_ww: dot_compensated(&lw, w),
            m_uu: dot_compensated(&mu, u),
            m_uw: 0.5 * (dot_compensated(&mu, w) + dot_compensated(&mw, u)),
            m_ww: dot_compensated(&mw, w),
            quartic: model.quartic_pencil(u, w),
        }
    }

    /// Mass ‖a·u + b·w‖²_{L²}.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        a * a * self.m_uu + 2.0 * a * b * self.m_uw + b * b * self.m_ww
    }

    pub fn energy(&self, a: f64, b: f64) -> f64 {
        let m = self.mass(a, b);
        if !(m > 0.0) || !m.is_finite() {
            return f64::INFINITY;
        }
        let quad = a * a * self.l_uu + 2.0 * a * b * self.l_uw + b * b * self.l_ww;
        0.5 * quad / m + (self.quartic)(a, b) / (m * m)
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization of a unimodal function on [lo, hi]; returns
/// the best evaluated point and its value.
pub fn golden_section_min(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Step size minimizing E(uⁿ⁺¹(τ)) on the bracket, never worse than τ = 1.
pub fn golden_section_tau(
    pencil: &EnergyPencil<'_>,
    gamma: f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> (f64, f64) {
    let phi = |t: f64| pencil.energy(1.0 - t, t * gamma);
    let (t, ft) = golden_section_min(phi, lo, hi, tol);
    if (lo..=hi).contains(&1.0) {
        let f1 = phi(1.0);
        if f1 <= ft {
            return (1.0, f1);
        }
    }
    (t, ft)
}

/// One MDRGM step with a fresh metric solve; returns (uⁿ⁺¹, u_prel).
pub fn mdrgm_step(model: &dyn EnergyModel, u: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0 && tau < 2.0) {
        return invalid(format!("τ = {tau} outside (0, 2)"));
    }
    check_normalized(model, u, 1e-10)?;
    let metric = model.metric(u)?;
    let mu = model.mass().matvec(u);
    let dir = metric_direction(metric.as_ref(), &mu, u, None, &CgSettings::default())?;
    let prel = lincomb(1.0 - tau, u, tau * dir.gamma, &dir.w);
    let nrm = model.mass_norm(&prel);
    Ok((prel.iter().map(|x| x / nrm).collect(), prel))
}

/// One GFDN step: normalize((M + τ𝓛_u)⁻¹ M u).
pub fn gfdn_step(model: &dyn EnergyModel, u: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return invalid(format!("τ = {tau} must be positive"));
    }
    check_normalized(model, u, 1e-10)?;
    let metric = model.metric(u)?;
    let mu = model.mass().matvec(u);
    let (x, rep) = metric.solve_shifted(1.0, tau, &mu, None, &CgSettings::default())?;
    if !rep.converged {
        return Err(Error::SolveFailed {
            context: "GFDN solve".into(),
            report: rep,
        });
    }
    let nrm = model.mass_norm(&x);
    Ok(x.iter().map(|v| v / nrm).collect())
}

fn check_normalized(model: &dyn EnergyModel, u: &[f64], tol: f64) -> Result<()> {
    let n = model.mass_norm(u);
    if (n - 1.0).abs() > tol {
        return invalid(format!("iterate not normalized: ‖u‖ = {n}"));
    }
    Ok(())
}

pub fn solve_ground_state(
    model: &dyn EnergyModel,
    u0: &[f64],
    config: &SolverConfig,
) -> Result<GroundState> {
    solve_ground_state_observed(model, u0, config, &mut |_, _| {})
}

/// As [`solve_ground_state`], calling `observe(n, uⁿ)` for every iterate (n = 0 first).
pub fn solve_ground_state_observed(
    model: &dyn EnergyModel,
    u0: &[f64],
    config: &SolverConfig,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Result<GroundState> {
    config.validate()?;
    if u0.len() != model.dim() {
        return invalid(format!(
            "initial vector has length {}, model expects {}",
            u0.len(),
            model.dim()
        ));
    }
    check_normalized(model, u0, 1e-8)?;
    let mut u = u0.to_vec();
    let mut energy = model.energy(&u);
    let mut trace = IterationTrace::default();
    let lambda0 = dot_compensated(&model.gradient(&u), &u);
    trace.records.push(IterationRecord {
        n: 0,
        energy,
        lambda: lambda0,
        tau: 0.0,
        step_h1: 0.0,
        mass_prel: 1.0,
        cg_iters: 0,
    });
    observe(0, &u);

    let mut prev_scale: Option<f64> = None;
    let mut last_gamma = None;
    let mut converged = false;
    let mut n = 0;
    while n < config.max_outer {
        n += 1;
        let metric = model.metric(&u)?;
        let mu = model.mass().matvec(&u);
        let (prel, tau, lambda, cg_iters) = match config.scheme {
            Scheme::Mdrgm | Scheme::InverseIteration => {
                let x0: Option<Vec<f64>> = match (config.warm_start, prev_scale) {
                    (true, Some(g)) => Some(u.iter().map(|v| v / g).collect()),
                    _ => None,
                };
                let dir = metric_direction(metric.as_ref(), &mu, &u, x0.as_deref(), &config.cg)?;
                let tau = match config.tau {
                    TauPolicy::Fixed(t) => t,
                    TauPolicy::GoldenSection { lo, hi, tol } => {
                        let pencil = EnergyPencil::new(model, &u, &dir.w);
                        golden_section_tau(&pencil, dir.gamma, lo, hi, tol).0
                    }
                };
                prev_scale = Some(dir.gamma);
                last_gamma = Some(dir.gamma);
                let prel = lincomb(1.0 - tau, &u, tau * dir.gamma, &dir.w);
                (prel, tau, dir.gamma, dir.report.iterations)
            }
            Scheme::Gfdn => {
                let TauPolicy::Fixed(tau) = config.tau else {
                    unreachable!("validated")
                };
                let lambda = dot_compensated(&metric.apply(&u), &u);
                let x0: Option<Vec<f64>> = match (config.warm_start, prev_scale) {
                    (true, Some(l)) => Some(u.iter().map(|v| v / (1.0 + tau * l)).collect()),
                    _ => None,
                };
                let (x, rep) = metric.solve_shifted(1.0, tau, &mu, x0.as_deref(), &config.cg)?;
                if !rep.converged {
                    return Err(Error::SolveFailed {
                        context: format!("GFDN solve at iteration {n}"),
                        report: rep,
                    });
                }
                prev_scale = Some(lambda);
                // Scale so that (u_prel, uⁿ)_M = 1, as for the MDRGM form.
                let s = dot_compensated(&x, &mu);
                (x.iter().map(|v| v / s).collect(), tau, lambda, rep.iterations)
            }
        };
        drop(metric);
        let mass_prel = model.mass_norm(&prel);
        let u_next: Vec<f64> = prel.iter().map(|v| v / mass_prel).collect();
        let e_next = model.energy(&u_next);
        if e_next > energy + config.energy_slack {
            return Err(Error::Invariant(format!(
                "{} energy increased at iteration {n}: {energy:.17e} → {e_next:.17e} (τ = {tau})",
                config.scheme.label()
            )));
        }
        let step_h1 = model.h1_norm(&sub(&u_next, &u));
        trace.records.push(IterationRecord {
            n,
            energy: e_next,
            lambda,
            tau,
            step_h1,
            mass_prel,
            cg_iters,
        });
        let decrease = energy - e_next;
        u = u_next;
        energy = e_next;
        observe(n, &u);
        if decrease < config.stop_energy_tol {
            converged = true;
            break;
        }
    }
    let residual = eigen_residual(model, &u)?;
    Ok(GroundState {
        lambda: residual.lambda,
        energy,
        iterations: n,
        converged,
        last_gamma,
        residual,
        u,
        trace,
    })
}

/// The Riemannian direction dⁿ = −uⁿ + γ𝓛_{uⁿ}⁻¹uⁿ.
pub fn riemannian_direction(model: &dyn EnergyModel, u: &[f64]) -> Result<Vec<f64>> {
    let metric = model.metric(u)?;
    let mu = model.mass().matvec(u);
    let dir = metric_direction(metric.as_ref(), &mu, u, None, &CgSettings::default())?;
    Ok(lincomb(-1.0, u, dir.gamma, &dir.w))
}

/// (u, d)_M for a direction d.
pub fn mass_inner(model: &dyn EnergyModel, u: &[f64], d: &[f64]) -> f64 {
    dot(&model.mass().matvec(u), d)
}
