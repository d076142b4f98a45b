//! Configuration-driven studies: single solves, scheme comparisons, LOD and
//! P1 rate studies, and the verification suite.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eigen::{dense_eig_oracle, smallest_eigpairs, DENSE_ORACLE_MAX_DIM};
use crate::error::{invalid, Error, Result};
use crate::field::{Field, Flavor};
use crate::io;
use crate::lod::{
    assemble_coarse_model, build_model_basis, default_layers, lod_ground_state, model_basis_tag,
    LodBasis, TwoLevelMesh,
};
use crate::mesh::{Mesh, Rect};
use crate::models::{
    constant, identity_coef, EnergyModel, FemModel, MatrixCoef, ModelKind, ModelParams,
    ScalarCoef, SoBecConstants,
};
use crate::solvers::{
    solve_ground_state, solve_ground_state_observed, GroundState, IterationTrace, Scheme,
    SolverConfig, TauPolicy,
};
use crate::space::FeSpace;
use crate::verify::{
    check_second_order, default_fd_steps, fd_gradient_check, fd_hessian_check, fit_rates,
    metric_identity_error, phase_align, phase_invariance_error, state_errors, OptimalityReport,
    RateFit, StateErrors,
};
use crate::vecops::{dot, norm2};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seeds randomized test vectors only; the initial state is deterministic.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub mesh: MeshSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub study: StudySpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear {
        #[serde(default)]
        diffusion: DiffusionSpec,
        #[serde(default)]
        potential: PotentialSpec,
    },
    Gpe {
        #[serde(default)]
        diffusion: DiffusionSpec,
        #[serde(default)]
        potential: PotentialSpec,
        beta: f64,
    },
    SoBec {
        #[serde(default = "so_bec_defaults::beta11")]
        beta11: f64,
        #[serde(default = "so_bec_defaults::beta12")]
        beta12: f64,
        #[serde(default = "so_bec_defaults::beta22")]
        beta22: f64,
        #[serde(default)]
        delta: f64,
        #[serde(default = "so_bec_defaults::omega")]
        omega: f64,
        #[serde(default = "so_bec_defaults::k0")]
        k0: f64,
        /// Constant potential for both components; default (Ω+δ+2k₀²)/2.
        potential: Option<f64>,
    },
}

mod so_bec_defaults {
    pub fn beta11() -> f64 {
        10.0
    }
    pub fn beta12() -> f64 {
        9.0
    }
    pub fn beta22() -> f64 {
        9.0
    }
    pub fn omega() -> f64 {
        50.0
    }
    pub fn k0() -> f64 {
        10.0
    }
}

/// Scalar diffusion A(x) = a(x)·I.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    #[default]
    Identity,
    Constant { value: f64 },
    /// `cells`×`cells` checkerboard over the domain alternating `low`/`high`.
    Checkerboard { cells: usize, low: f64, high: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Constant { value: f64 },
    /// ½(ωₓ²x² + ω_y²y²).
    Harmonic { omega_x: f64, omega_y: f64 },
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    /// [x0, x1, y0, y1]
    #[serde(default = "unit_domain")]
    pub domain: [f64; 4],
    pub n: usize,
    #[serde(default = "one")]
    pub order: usize,
}

fn unit_domain() -> [f64; 4] {
    [0.0, 1.0, 0.0, 1.0]
}
fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialShape {
    /// so_bec_reference for the spin-orbit model, sine_product otherwise.
    #[default]
    Auto,
    /// u₁ = ½(x−1)²(y−1)² e^{−i(x²+y²)/2}, u₂ = 2u₁.
    SoBecReference,
    /// Product of half-wave sines on the domain.
    SineProduct,
    /// exp(−|x−center|²/width²), optionally with a phase e^{i·phase_k·x}.
    Gaussian,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub shape: InitialShape,
    pub center: Option<[f64; 2]>,
    pub width: Option<f64>,
    /// Wave number of a plane-wave phase in x (complex flavors only).
    pub phase_k: Option<f64>,
    /// Field flavor; defaults to real for linear/GPE and spinor for SO-BEC.
    pub flavor: Option<Flavor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    /// Fixed MDRGM step; golden-section search when absent.
    pub tau: Option<f64>,
    #[serde(default = "default_bracket")]
    pub tau_bracket: [f64; 2],
    #[serde(default = "default_golden_tol")]
    pub golden_tol: f64,
    #[serde(default = "one_f")]
    pub gfdn_tau: f64,
    #[serde(default = "default_stop")]
    pub stop_energy_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Mdrgm]
}
fn default_bracket() -> [f64; 2] {
    [0.05, 2.0]
}
fn default_golden_tol() -> f64 {
    1e-4
}
fn one_f() -> f64 {
    1.0
}
fn default_stop() -> f64 {
    1e-11
}
fn default_max_outer() -> usize {
    20_000
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            schemes: default_schemes(),
            tau: None,
            tau_bracket: default_bracket(),
            golden_tol: default_golden_tol(),
            gfdn_tau: 1.0,
            stop_energy_tol: default_stop(),
            max_outer: default_max_outer(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudySpec {
    SingleSolve {
        #[serde(default = "yes")]
        export_density: bool,
        /// Compare λ with the dense oracle and measure H¹ contraction (linear model).
        #[serde(default)]
        linear_oracle: bool,
        #[serde(default)]
        second_order: bool,
    },
    IterationComparison {
        /// Require MDRGM to be fastest and lowest (iteration ratio ≤ `max_mdrgm_ratio`).
        #[serde(default)]
        expect_mdrgm_fastest: bool,
        #[serde(default)]
        second_order: bool,
        #[serde(default = "three")]
        hessian_eigs: usize,
        #[serde(default = "default_ratio")]
        max_mdrgm_ratio: f64,
        #[serde(default = "default_agreement")]
        energy_agreement: f64,
        #[serde(default = "default_residual")]
        residual_tol: f64,
        #[serde(default = "default_gap")]
        min_gap: f64,
        #[serde(default = "default_eig_rel")]
        eig_rel_tol: f64,
    },
    /// The mesh section describes the fine P1 reference; coarse meshes have
    /// H/side ∈ `ratios`.
    LodRateStudy {
        ratios: Vec<f64>,
        /// Patch layers; ceil(|log₂(H/side)|) + `extra_layers` when absent.
        layers: Option<usize>,
        #[serde(default)]
        extra_layers: usize,
        cache_dir: Option<String>,
        #[serde(default = "three")]
        fit_points: usize,
        min_h1_slope: Option<f64>,
        min_energy_slope: Option<f64>,
    },
    P1RateStudy {
        ratios: Vec<f64>,
        cache_dir: Option<String>,
        #[serde(default = "three")]
        fit_points: usize,
        max_h1_slope: Option<f64>,
        max_energy_slope: Option<f64>,
    },
    VerifySuite {
        #[serde(default = "fifty")]
        random_fields: usize,
        #[serde(default = "four")]
        eig_pairs: usize,
    },
}

fn yes() -> bool {
    true
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn fifty() -> usize {
    50
}
fn default_ratio() -> f64 {
    0.7
}
fn default_agreement() -> f64 {
    1e-6
}
fn default_residual() -> f64 {
    1e-7
}
fn default_gap() -> f64 {
    0.1
}
fn default_eig_rel() -> f64 {
    1e-5
}

impl StudySpec {
    pub fn label(&self) -> &'static str {
        match self {
            StudySpec::SingleSolve { .. } => "single_solve",
            StudySpec::IterationComparison { .. } => "iteration_comparison",
            StudySpec::LodRateStudy { .. } => "lod_rate_study",
            StudySpec::P1RateStudy { .. } => "p1_rate_study",
            StudySpec::VerifySuite { .. } => "verify_suite",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Defaults to `out/<name>`.
    pub dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; returns it with the raw text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        let cfgerr = |m: String| Err(Error::Config(m));
        let [x0, x1, y0, y1] = self.mesh.domain;
        if !(x1 > x0 && y1 > y0) {
            return cfgerr(format!("mesh.domain {:?} is empty", self.mesh.domain));
        }
        if self.mesh.n == 0 || !(1..=2).contains(&self.mesh.order) {
            return cfgerr("mesh.n must be positive and mesh.order 1 or 2".into());
        }
        if self.solver.schemes.is_empty() {
            return cfgerr("solver.schemes is empty".into());
        }
        self.params().validate()?;
        if !self.params().accepts_flavor(self.flavor()) {
            return cfgerr(format!("flavor {:?} does not fit the model", self.flavor()));
        }
        for &s in &self.solver.schemes {
            self.solver_config(s).validate()?;
        }
        if let DiffusionSpec::Checkerboard { cells, low, high } = self.diffusion() {
            if cells == 0 || !(low > 0.0) || !(high > 0.0) {
                return cfgerr("checkerboard needs cells ≥ 1 and positive values".into());
            }
        }
        if let StudySpec::LodRateStudy { layers, extra_layers, .. } = self.study {
            if layers == Some(0) {
                return cfgerr("study.layers must be at least 1".into());
            }
            if layers.is_some() && extra_layers > 0 {
                return cfgerr("study.layers and study.extra_layers are exclusive".into());
            }
        }
        match &self.study {
            StudySpec::LodRateStudy { ratios, fit_points, .. }
            | StudySpec::P1RateStudy { ratios, fit_points, .. } => {
                if self.mesh.order != 1 {
                    return cfgerr("rate studies use a P1 fine reference (mesh.order = 1)".into());
                }
                if *fit_points < 2 || *fit_points > ratios.len() {
                    return cfgerr("study.fit_points must be between 2 and the number of ratios".into());
                }
                if (x1 - x0 - (y1 - y0)).abs() > 1e-12 {
                    return cfgerr("rate studies need a square domain".into());
                }
                for &r in ratios {
                    let nc = (1.0 / r).round() as usize;
                    if !(r > 0.0) || (nc as f64 * r - 1.0).abs() > 1e-12 || nc == 0 || self.mesh.n % nc != 0
                        || !(self.mesh.n / nc).is_power_of_two()
                    {
                        return cfgerr(format!(
                            "ratio {r} does not give a coarse mesh nested in the {}-cell fine mesh",
                            self.mesh.n
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn diffusion(&self) -> DiffusionSpec {
        match &self.model {
            ModelSpec::Linear { diffusion, .. } | ModelSpec::Gpe { diffusion, .. } => diffusion.clone(),
            ModelSpec::SoBec { .. } => DiffusionSpec::Identity,
        }
    }

    pub fn rect(&self) -> Rect {
        let [x0, x1, y0, y1] = self.mesh.domain;
        Rect::new(x0, x1, y0, y1)
    }

    pub fn params(&self) -> ModelParams {
        let rect = self.rect();
        match &self.model {
            ModelSpec::Linear { diffusion, potential } => {
                ModelParams::linear(diffusion_coef(diffusion, rect), potential_coef(potential))
            }
            ModelSpec::Gpe { diffusion, potential, beta } => {
                ModelParams::gpe(diffusion_coef(diffusion, rect), potential_coef(potential), *beta)
            }
            &ModelSpec::SoBec { beta11, beta12, beta22, delta, omega, k0, potential } => {
                let c = SoBecConstants { beta11, beta12, beta22, delta, omega, k0 };
                let v = potential.unwrap_or_else(|| c.experiment_potential());
                ModelParams::so_bec(c, constant(v), constant(v))
            }
        }
    }

    pub fn flavor(&self) -> Flavor {
        self.initial.flavor.unwrap_or_else(|| self.params().default_flavor())
    }

    pub fn space(&self) -> Result<Arc<FeSpace>> {
        let m = Mesh::new(self.rect(), self.mesh.n, self.mesh.n)?;
        Ok(Arc::new(FeSpace::new(m, self.mesh.order)?))
    }

    /// Normalized nodal interpolant of the initial state on `space`.
    pub fn initial_field(&self, space: Arc<FeSpace>) -> Result<Field> {
        let rect = self.rect();
        let flavor = self.flavor();
        let shape = match self.initial.shape {
            InitialShape::Auto => match self.model {
                ModelSpec::SoBec { .. } => InitialShape::SoBecReference,
                _ => InitialShape::SineProduct,
            },
            s => s,
        };
        let center = self.initial.center.unwrap_or([
            0.5 * (rect.x0 + rect.x1),
            0.5 * (rect.y0 + rect.y1),
        ]);
        let width = self.initial.width.unwrap_or(0.25 * rect.side());
        let k = self.initial.phase_k.unwrap_or(0.0);
        let f = move |x: [f64; 2]| -> [Complex64; 2] {
            let phase = Complex64::new(0.0, k * x[0]).exp();
            match shape {
                InitialShape::SoBecReference => {
                    let a = (x[0] - 1.0).powi(2) * (x[1] - 1.0).powi(2);
                    let ph = Complex64::new(0.0, -(x[0] * x[0] + x[1] * x[1]) / 2.0).exp();
                    [ph * (0.5 * a), ph * a]
                }
                InitialShape::SineProduct | InitialShape::Auto => {
                    let s = (std::f64::consts::PI * (x[0] - rect.x0) / (rect.x1 - rect.x0)).sin()
                        * (std::f64::consts::PI * (x[1] - rect.y0) / (rect.y1 - rect.y0)).sin();
                    [phase * s, phase * s]
                }
                InitialShape::Gaussian => {
                    let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                    let g = (-r2 / (width * width)).exp();
                    [phase * g, phase * g]
                }
            }
        };
        Field::interpolate(space, flavor, &f).normalize_l2()
    }

    pub fn solver_config(&self, scheme: Scheme) -> SolverConfig {
        let mut c = SolverConfig::new(scheme);
        let s = &self.solver;
        c.stop_energy_tol = s.stop_energy_tol;
        c.max_outer = s.max_outer;
        c.tau = match scheme {
            Scheme::Mdrgm => match s.tau {
                Some(t) => TauPolicy::Fixed(t),
                None => TauPolicy::GoldenSection {
                    lo: s.tau_bracket[0],
                    hi: s.tau_bracket[1],
                    tol: s.golden_tol,
                },
            },
            Scheme::InverseIteration => TauPolicy::Fixed(1.0),
            Scheme::Gfdn => TauPolicy::Fixed(s.gfdn_tau),
        };
        c
    }

    pub fn fem_model(&self, space: Arc<FeSpace>) -> Result<FemModel> {
        FemModel::new(self.params(), space, self.flavor())
    }
}

/// Patch layers of an LOD rate study.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerRule {
    /// Fixed ℓ for every coarse mesh.
    pub fixed: Option<usize>,
    /// Added to ceil(|log₂(H/side)|) when `fixed` is absent.
    pub extra: usize,
}

impl LayerRule {
    pub fn layers(&self, h: f64, side: f64) -> usize {
        self.fixed.unwrap_or_else(|| default_layers(h, side) + self.extra)
    }
}

impl StudySpec {
    pub fn layer_rule(&self) -> LayerRule {
        match self {
            StudySpec::LodRateStudy { layers, extra_layers, .. } => LayerRule {
                fixed: *layers,
                extra: *extra_layers,
            },
            _ => LayerRule::default(),
        }
    }
}

fn diffusion_coef(d: &DiffusionSpec, rect: Rect) -> MatrixCoef {
    match *d {
        DiffusionSpec::Identity => identity_coef(),
        DiffusionSpec::Constant { value } => Arc::new(move |_| [[value, 0.0], [0.0, value]]),
        DiffusionSpec::Checkerboard { cells, low, high } => Arc::new(move |x: [f64; 2]| {
            let cell = |t: f64, a: f64, b: f64| (((t - a) / (b - a) * cells as f64).floor() as i64).clamp(0, cells as i64 - 1);
            let i = cell(x[0], rect.x0, rect.x1);
            let j = cell(x[1], rect.y0, rect.y1);
            let v = if (i + j) % 2 == 0 { low } else { high };
            [[v, 0.0], [0.0, v]]
        }),
    }
}

fn potential_coef(p: &PotentialSpec) -> ScalarCoef {
    match *p {
        PotentialSpec::Constant { value } => constant(value),
        PotentialSpec::Harmonic { omega_x, omega_y } => {
            Arc::new(move |x: [f64; 2]| 0.5 * (omega_x * omega_x * x[0] * x[0] + omega_y * omega_y * x[1] * x[1]))
        }
    }
}

/// One named pass/fail outcome.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub study: String,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub name: String,
    pub study: String,
    pub config_sha256: String,
    pub seed: u64,
    pub build: String,
    pub passed: bool,
    pub files: Vec<String>,
}

pub fn build_id() -> String {
    format!(
        "mdgs {} ({})",
        env!("CARGO_PKG_VERSION"),
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs the configured study, writing artifacts and a manifest to `out`.
pub fn run(cfg: &ExperimentConfig, raw: &str, out: &Path) -> Result<StudyReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let report = match &cfg.study {
        StudySpec::SingleSolve { .. } => single_solve(cfg, out, &mut files)?,
        StudySpec::IterationComparison { .. } => iteration_comparison(cfg, out, &mut files)?,
        StudySpec::LodRateStudy { .. } | StudySpec::P1RateStudy { .. } => {
            rate_study(cfg, out, &mut files)?
        }
        StudySpec::VerifySuite { .. } => verify_suite(cfg)?,
    };
    write_text(out, "report.txt", &report.to_text(), &mut files)?;
    write_json(out, "report.json", &report, &mut files)?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        study: cfg.study.label().to_string(),
        config_sha256: sha256_hex(raw.as_bytes()),
        seed: cfg.seed,
        build: build_id(),
        passed: report.passed(),
        files,
    };
    let mut dummy = Vec::new();
    write_json(out, "manifest.json", &manifest, &mut dummy)?;
    Ok(report)
}

fn write_text(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    files.push(name.to_string());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T, files: &mut Vec<String>) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))?;
    write_text(dir, name, &s, files)
}

/// Largest per-step energy increase and smallest preliminary mass in a trace.
pub fn trace_extremes(trace: &IterationTrace) -> (f64, f64) {
    let mut max_inc = f64::NEG_INFINITY;
    let mut min_mass = f64::INFINITY;
    for w in trace.records.windows(2) {
        max_inc = max_inc.max(w[1].energy - w[0].energy);
        min_mass = min_mass.min(w[1].mass_prel);
    }
    (max_inc, min_mass)
}

/// Energy dissipation and mass growth checks of one run.
pub fn trace_checks(label: &str, trace: &IterationTrace) -> Vec<Check> {
    let (inc, mass) = trace_extremes(trace);
    vec![
        Check::new(
            format!("{label} energy dissipation"),
            inc <= 1e-13,
            format!("max E(uⁿ⁺¹) − E(uⁿ) = {inc:.3e}"),
        ),
        Check::new(
            format!("{label} preliminary mass growth"),
            mass >= 1.0 - 1e-12,
            format!("min ‖u_prel‖ = {mass:.15}"),
        ),
    ]
}

fn export_state(model: &FemModel, u: &[f64], out: &Path, stem: &str, files: &mut Vec<String>) -> Result<()> {
    let f = model.field(u)?;
    let vtk = format!("{stem}.vtk");
    io::write_density_vtk(&f, &out.join(&vtk))?;
    files.push(vtk);
    let csv = format!("{stem}.csv");
    io::write_density_csv(&f, &out.join(&csv))?;
    files.push(csv);
    Ok(())
}

fn single_solve(cfg: &ExperimentConfig, out: &Path, files: &mut Vec<String>) -> Result<StudyReport> {
    let StudySpec::SingleSolve { export_density, linear_oracle, second_order } = cfg.study else {
        unreachable!()
    };
    let space = cfg.space()?;
    let model = cfg.fem_model(space.clone())?;
    let u0 = cfg.initial_field(space)?.interior();
    let scheme = cfg.solver.schemes[0];
    let mut checks = Vec::new();
    let mut summary = serde_json::Map::new();

    let gs = if linear_oracle {
        let lc = linear_contraction(&model, &u0, &cfg.solver_config(scheme))?;
        checks.push(Check::new(
            "lambda matches dense oracle",
            (lc.state.lambda - lc.lambda1).abs() <= 1e-6 * lc.lambda1,
            format!("λ = {:.12}, oracle λ₁ = {:.12}", lc.state.lambda, lc.lambda1),
        ));
        let (obs, dev) = lc.asymptotic_ratio();
        checks.push(Check::new(
            "H1 contraction factor",
            dev <= 0.02,
            format!("observed {obs:.4}, λ₁/λ₂ = {:.4}", lc.lambda1 / lc.lambda2),
        ));
        summary.insert("lambda1".into(), lc.lambda1.into());
        summary.insert("lambda2".into(), lc.lambda2.into());
        summary.insert("h1_error_ratios".into(), serde_json::json!(lc.ratios));
        lc.state
    } else {
        solve_ground_state(&model, &u0, &cfg.solver_config(scheme))?
    };
    let stem = scheme_stem(scheme);
    gs.trace.write_csv(&out.join(format!("trace_{stem}.csv")))?;
    files.push(format!("trace_{stem}.csv"));
    checks.push(Check::new(
        format!("{} converged", scheme.label()),
        gs.converged,
        format!("{} iterations", gs.iterations),
    ));
    checks.extend(trace_checks(scheme.label(), &gs.trace));
    if export_density {
        export_state(&model, &gs.u, out, "density", files)?;
    }
    if second_order {
        let rep = check_second_order(&model, &gs.u, 3)?;
        checks.extend(second_order_checks(scheme.label(), &rep, 1e-7, 1e-5, 0.0));
        summary.insert("second_order".into(), serde_json::to_value(&rep).unwrap_or_default());
    }
    summary.insert("scheme".into(), scheme.label().into());
    summary.insert("iterations".into(), gs.iterations.into());
    summary.insert("energy".into(), gs.energy.into());
    summary.insert("lambda".into(), gs.lambda.into());
    summary.insert("residual_max".into(), gs.residual.residual_max.into());
    Ok(StudyReport {
        study: "single_solve".into(),
        checks,
        summary: summary.into(),
    })
}

fn scheme_stem(s: Scheme) -> &'static str {
    match s {
        Scheme::Mdrgm => "mdrgm",
        Scheme::InverseIteration => "inverse_iteration",
        Scheme::Gfdn => "gfdn",
    }
}

/// Inverse-iteration run on a linear model with H¹ errors to the exact
/// discrete ground state.
pub struct LinearContraction {
    pub state: GroundState,
    pub lambda1: f64,
    pub lambda2: f64,
    /// ‖u* − uⁿ⁺¹‖_{H¹}/‖u* − uⁿ‖_{H¹}.
    pub ratios: Vec<f64>,
    pub errors: Vec<f64>,
}

impl LinearContraction {
    /// Mean of the last three ratios taken while the error is above the
    /// round-off floor, and its largest deviation from λ₁/λ₂.
    pub fn asymptotic_ratio(&self) -> (f64, f64) {
        let target = self.lambda1 / self.lambda2;
        let usable: Vec<f64> = self
            .ratios
            .iter()
            .zip(&self.errors)
            .filter(|(_, e)| **e > 1e-7)
            .map(|(r, _)| *r)
            .collect();
        let tail = &usable[usable.len().saturating_sub(3)..];
        if tail.is_empty() {
            return (f64::NAN, f64::INFINITY);
        }
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let dev = tail.iter().map(|r| (r - target).abs()).fold(0.0, f64::max);
        (mean, dev)
    }
}

pub fn linear_contraction(model: &FemModel, u0: &[f64], config: &SolverConfig) -> Result<LinearContraction> {
    if !matches!(model.params().kind, ModelKind::Linear) {
        return invalid("the contraction study needs a linear model");
    }
    let (lambda1, lambda2, ustar) = if model.dim() <= DENSE_ORACLE_MAX_DIM {
        let sp = dense_eig_oracle(&model.l0().to_dense(), &model.mass().to_dense())?;
        (sp.values[0], sp.values[1], sp.vectors.column(0).iter().cloned().collect::<Vec<f64>>())
    } else {
        let mut p = smallest_eigpairs(model.l0(), model.mass(), 2, 1e-10, None)?;
        let (l2, _) = p.pop().expect("two pairs");
        let (l1, v1) = p.pop().expect("two pairs");
        (l1, l2, v1)
    };
    let layout = model.layout();
    let mut errors = Vec::new();
    let state = solve_ground_state_observed(model, u0, config, &mut |_, u| {
        let ua = phase_align(&layout, model.mass(), &ustar, u);
        let d: Vec<f64> = ua.iter().zip(&ustar).map(|(a, b)| a - b).collect();
        errors.push(model.h1_norm(&d));
    })?;
    let ratios = errors.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(LinearContraction {
        state,
        lambda1,
        lambda2,
        ratios,
        errors: errors[1..].to_vec(),
    })
}

pub fn second_order_checks(
    label: &str,
    rep: &OptimalityReport,
    residual_tol: f64,
    eig_rel_tol: f64,
    min_gap: f64,
) -> Vec<Check> {
    let ascending = rep.tangent_eigs.windows(2).all(|w| w[0] <= w[1]);
    vec![
        Check::new(
            format!("{label} first-order residual"),
            rep.first_order_residual_max <= residual_tol,
            format!("max-norm {:.3e} (dual {:.3e})", rep.first_order_residual_max, rep.first_order_residual_dual),
        ),
        Check::new(
            format!("{label} tangent Hessian eigenvalues ascending"),
            ascending,
            format!("{:?}", rep.tangent_eigs),
        ),
        Check::new(
            format!("{label} eig1 equals lambda"),
            rep.eig1_rel_error() <= eig_rel_tol,
            format!("eig₁ = {:.10}, λ = {:.10}, rel {:.2e}", rep.tangent_eigs[0], rep.lambda, rep.eig1_rel_error()),
        ),
        Check::new(
            format!("{label} quasi-isolated"),
            rep.gap() > min_gap && rep.quasi_isolated,
            format!("eig₂ − eig₁ = {:.6}", rep.gap()),
        ),
    ]
}

/// Result of one scheme in a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeResult {
    pub method: String,
    pub iterations: usize,
    pub energy: f64,
    pub lambda: f64,
    pub converged: bool,
    pub residual_max: f64,
}

fn iteration_comparison(cfg: &ExperimentConfig, out: &Path, files: &mut Vec<String>) -> Result<StudyReport> {
    let StudySpec::IterationComparison {
        expect_mdrgm_fastest,
        second_order,
        hessian_eigs,
        max_mdrgm_ratio,
        energy_agreement,
        residual_tol,
        min_gap,
        eig_rel_tol,
    } = cfg.study
    else {
        unreachable!()
    };
    let space = cfg.space()?;
    let model = cfg.fem_model(space.clone())?;
    let u0 = cfg.initial_field(space)?.interior();
    let mut checks = Vec::new();
    let mut results = Vec::new();
    let mut eig_reports = Vec::new();
    for &scheme in &cfg.solver.schemes {
        let gs = solve_ground_state(&model, &u0, &cfg.solver_config(scheme))?;
        let stem = scheme_stem(scheme);
        gs.trace.write_csv(&out.join(format!("trace_{stem}.csv")))?;
        files.push(format!("trace_{stem}.csv"));
        checks.push(Check::new(
            format!("{} converged", scheme.label()),
            gs.converged,
            format!("{} iterations", gs.iterations),
        ));
        checks.extend(trace_checks(scheme.label(), &gs.trace));
        if second_order {
            let rep = check_second_order(&model, &gs.u, hessian_eigs)?;
            checks.extend(second_order_checks(scheme.label(), &rep, residual_tol, eig_rel_tol, min_gap));
            eig_reports.push((scheme.label(), rep));
        } else {
            checks.push(Check::new(
                format!("{} first-order residual", scheme.label()),
                gs.residual.residual_max <= residual_tol,
                format!("max-norm {:.3e}", gs.residual.residual_max),
            ));
        }
        if scheme == Scheme::Mdrgm {
            export_state(&model, &gs.u, out, "density_mdrgm", files)?;
        }
        results.push((scheme, SchemeResult {
            method: scheme.label().into(),
            iterations: gs.iterations,
            energy: gs.energy,
            lambda: gs.lambda,
            converged: gs.converged,
            residual_max: gs.residual.residual_max,
        }));
    }
    checks.extend(comparison_checks(&results, expect_mdrgm_fastest, max_mdrgm_ratio, energy_agreement));

    let mut csv = String::from("method,iterations,energy,lambda\n");
    let mut md = String::from("| method | iterations | energy | eigenvalue |\n|---|---|---|---|\n");
    for (_, r) in &results {
        csv.push_str(&format!("{},{},{:.12},{:.12}\n", r.method, r.iterations, r.energy, r.lambda));
        md.push_str(&format!("| {} | {} | {:.12} | {:.12} |\n", r.method, r.iterations, r.energy, r.lambda));
    }
    write_text(out, "summary.csv", &csv, files)?;
    write_text(out, "summary.md", &md, files)?;
    if !eig_reports.is_empty() {
        let mut e = String::from("method,lambda,eig1,eig2,eig3\n");
        for (m, r) in &eig_reports {
            e.push_str(&format!("{m},{:.12}", r.lambda));
            for v in &r.tangent_eigs {
                e.push_str(&format!(",{v:.12}"));
            }
            e.push('\n');
        }
        write_text(out, "hessian_eigs.csv", &e, files)?;
    }
    Ok(StudyReport {
        study: "iteration_comparison".into(),
        checks,
        summary: serde_json::json!({
            "results": results.iter().map(|(_, r)| r).collect::<Vec<_>>(),
            "tangent_hessian": eig_reports.iter().map(|(m, r)| serde_json::json!({"method": m, "report": r})).collect::<Vec<_>>(),
        }),
    })
}

/// Ordering and agreement checks across schemes.
pub fn comparison_checks(
    results: &[(Scheme, SchemeResult)],
    ordering: bool,
    max_ratio: f64,
    agreement: f64,
) -> Vec<Check> {
    let mut checks = Vec::new();
    let find = |s: Scheme| results.iter().find(|(k, _)| *k == s).map(|(_, r)| r);
    if let (true, Some(m)) = (ordering, find(Scheme::Mdrgm)) {
        let others: Vec<&SchemeResult> = results.iter().filter(|(k, _)| *k != Scheme::Mdrgm).map(|(_, r)| r).collect();
        if !others.is_empty() {
            checks.push(Check::new(
                "MDRGM needs strictly fewest iterations",
                others.iter().all(|o| m.iterations < o.iterations),
                results.iter().map(|(_, r)| format!("{} {}", r.method, r.iterations)).collect::<Vec<_>>().join(", "),
            ));
            checks.push(Check::new(
                "MDRGM reaches the lowest energy",
                others.iter().all(|o| m.energy <= o.energy),
                results.iter().map(|(_, r)| format!("{} {:.13}", r.method, r.energy)).collect::<Vec<_>>().join(", "),
            ));
        }
        if let Some(inv) = find(Scheme::InverseIteration) {
            let ratio = m.iterations as f64 / inv.iterations as f64;
            checks.push(Check::new(
                "MDRGM/InvIter iteration ratio",
                ratio <= max_ratio,
                format!("{ratio:.3} (limit {max_ratio})"),
            ));
        }
    }
    let mut worst: f64 = 0.0;
    for (i, (_, a)) in results.iter().enumerate() {
        for (_, b) in &results[i + 1..] {
            worst = worst.max((a.energy - b.energy).abs());
        }
    }
    if results.len() > 1 {
        checks.push(Check::new(
            "final energies agree",
            worst <= agreement,
            format!("max pairwise difference {worst:.3e}"),
        ));
    }
    checks
}

/// One row of a rate study.
#[derive(Debug, Clone, Serialize)]
pub struct RatePoint {
    pub h_ratio: f64,
    pub n_coarse: usize,
    pub layers: Option<usize>,
    pub iterations: usize,
    pub energy: f64,
    pub errors: StateErrors,
}

/// Data shared by the LOD and P1 rate studies.
pub struct FineReference {
    pub model: Arc<FemModel>,
    pub u0: Vec<f64>,
    pub u: Vec<f64>,
    pub energy: f64,
}

fn cache_key(cfg: &ExperimentConfig) -> String {
    let desc = serde_json::json!({
        "model": cfg.model,
        "mesh": cfg.mesh,
        "initial": cfg.initial,
        "stop": cfg.solver.stop_energy_tol,
    });
    sha256_hex(desc.to_string().as_bytes())[..16].to_string()
}

/// Fine P1 ground state (MDRGM), cached under `cache` when given.
pub fn fine_reference(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<FineReference> {
    let space = cfg.space()?;
    let model = Arc::new(cfg.fem_model(space.clone())?);
    let u0 = cfg.initial_field(space)?.interior();
    let path = cache.map(|c| c.join(format!("reference_{}.bin", cache_key(cfg))));
    let cached = path.as_ref().and_then(|p| io::read_vector(p).ok()).filter(|v| v.len() == model.dim());
    let u = match cached {
        Some(u) => u,
        None => {
            let gs = solve_ground_state(&*model, &u0, &cfg.solver_config(Scheme::Mdrgm))?;
            if !gs.converged {
                return Err(Error::Invariant("fine reference did not converge".into()));
            }
            if let (Some(p), Some(c)) = (&path, cache) {
                std::fs::create_dir_all(c).map_err(|e| Error::io(c, e))?;
                io::write_vector(p, &gs.u)?;
            }
            gs.u
        }
    };
    let energy = model.energy(&u);
    Ok(FineReference { model, u0, u, energy })
}

/// Coarse mesh for H/side = ratio on the configured domain.
fn coarse_cells(ratio: f64) -> usize {
    (1.0 / ratio).round() as usize
}

/// LOD ground states for each ratio.
pub fn lod_points(
    cfg: &ExperimentConfig,
    reference: &FineReference,
    ratios: &[f64],
    layers: LayerRule,
    cache: Option<&Path>,
) -> Result<Vec<RatePoint>> {
    let fine_space = reference.model.space().clone();
    let tag = model_basis_tag(&reference.model);
    let side = cfg.rect().side();
    let mut points = Vec::new();
    for &r in ratios {
        let nc = coarse_cells(r);
        let coarse = Arc::new(FeSpace::new(Mesh::new(cfg.rect(), nc, nc)?, 1)?);
        let tl = TwoLevelMesh::from_spaces(coarse, fine_space.clone())?;
        let l = layers.layers(tl.coarse_h(), side);
        let file = cache.map(|c| c.join(format!("lod_{}_c{nc}_l{l}.bin", cache_key(cfg))));
        let basis = match file.as_ref().and_then(|f| LodBasis::read(f).ok()) {
            Some(b) if b.matches(&tl) && b.layers() == Some(l) && b.descriptor.metric_tag == tag => b,
            _ => {
                let b = build_model_basis(&tl, &reference.model, Some(l))?;
                if let (Some(f), Some(c)) = (&file, cache) {
                    std::fs::create_dir_all(c).map_err(|e| Error::io(c, e))?;
                    b.write(f)?;
                }
                b
            }
        };
        let red = assemble_coarse_model(reference.model.clone(), &basis)?;
        let gs = lod_ground_state(&red, &reference.u0, &cfg.solver_config(Scheme::Mdrgm))?;
        if !gs.coarse.converged {
            return Err(Error::Invariant(format!("LOD solve at H/side = {r} did not converge")));
        }
        let errors = state_errors(&*reference.model, &reference.u, &gs.fine_u);
        points.push(RatePoint {
            h_ratio: r,
            n_coarse: nc,
            layers: Some(l),
            iterations: gs.coarse.iterations,
            energy: gs.coarse.energy,
            errors,
        });
    }
    Ok(points)
}

/// Plain P1 ground states on the coarse meshes, prolonged to the fine mesh.
pub fn p1_points(cfg: &ExperimentConfig, reference: &FineReference, ratios: &[f64]) -> Result<Vec<RatePoint>> {
    let fine_space = reference.model.space().clone();
    let mut points = Vec::new();
    for &r in ratios {
        let nc = coarse_cells(r);
        let coarse = Arc::new(FeSpace::new(Mesh::new(cfg.rect(), nc, nc)?, 1)?);
        let tl = TwoLevelMesh::from_spaces(coarse.clone(), fine_space.clone())?;
        let model = cfg.fem_model(coarse.clone())?;
        let u0 = cfg.initial_field(coarse)?.interior();
        let gs = solve_ground_state(&model, &u0, &cfg.solver_config(Scheme::Mdrgm))?;
        if !gs.converged {
            return Err(Error::Invariant(format!("P1 solve at H/side = {r} did not converge")));
        }
        let layout = model.layout();
        let fl = reference.model.layout();
        let mut fine_u = vec![0.0; fl.dim()];
        for s in 0..layout.slots() {
            let v = tl.prolong(&layout.gather_slot(s, &gs.u));
            fl.scatter_slot(s, &v, &mut fine_u);
        }
        let errors = state_errors(&*reference.model, &reference.u, &fine_u);
        points.push(RatePoint {
            h_ratio: r,
            n_coarse: nc,
            layers: None,
            iterations: gs.iterations,
            energy: gs.energy,
            errors,
        });
    }
    Ok(points)
}

/// Least-squares H¹ and energy fits over the `fit_points` finest ratios.
pub fn fit_points(points: &[RatePoint], fit_points: usize) -> Result<(RateFit, RateFit)> {
    let mut sorted: Vec<&RatePoint> = points.iter().collect();
    sorted.sort_by(|a, b| b.h_ratio.total_cmp(&a.h_ratio));
    let tail = &sorted[sorted.len().saturating_sub(fit_points)..];
    let h1: Vec<(f64, f64)> = tail.iter().map(|p| (p.h_ratio, p.errors.h1)).collect();
    let en: Vec<(f64, f64)> = tail.iter().map(|p| (p.h_ratio, p.errors.energy)).collect();
    Ok((fit_rates(&h1)?, fit_rates(&en)?))
}

fn rate_csv(points: &[RatePoint]) -> String {
    let mut s = String::from("h_ratio,n_coarse,layers,iterations,energy,h1_error,energy_error,density_l2_error\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{:.15e},{:.15e},{:.15e},{:.15e}\n",
            p.h_ratio,
            p.n_coarse,
            p.layers.map_or(String::new(), |l| l.to_string()),
            p.iterations,
            p.energy,
            p.errors.h1,
            p.errors.energy,
            p.errors.density_l2
        ));
    }
    s
}

fn rate_study(cfg: &ExperimentConfig, out: &Path, files: &mut Vec<String>) -> Result<StudyReport> {
    let (ratios, cache, fit_n, is_lod) = match &cfg.study {
        StudySpec::LodRateStudy { ratios, cache_dir, fit_points, .. } => (ratios, cache_dir, *fit_points, true),
        StudySpec::P1RateStudy { ratios, cache_dir, fit_points, .. } => (ratios, cache_dir, *fit_points, false),
        _ => unreachable!(),
    };
    let cache: Option<PathBuf> = cache.as_ref().map(PathBuf::from);
    let reference = fine_reference(cfg, cache.as_deref())?;
    let points = if is_lod {
        lod_points(cfg, &reference, ratios, cfg.study.layer_rule(), cache.as_deref())?
    } else {
        p1_points(cfg, &reference, ratios)?
    };
    let (h1, en) = fit_points(&points, fit_n)?;
    write_text(out, "rates.csv", &rate_csv(&points), files)?;
    let mut checks = Vec::new();
    match cfg.study {
        StudySpec::LodRateStudy { min_h1_slope, min_energy_slope, .. } => {
            if let Some(m) = min_h1_slope {
                checks.push(Check::new("LOD H1 slope", h1.slope >= m, format!("{:.3} (≥ {m})", h1.slope)));
            }
            if let Some(m) = min_energy_slope {
                checks.push(Check::new("LOD energy slope", en.slope >= m, format!("{:.3} (≥ {m})", en.slope)));
            }
        }
        StudySpec::P1RateStudy { max_h1_slope, max_energy_slope, .. } => {
            if let Some(m) = max_h1_slope {
                checks.push(Check::new("P1 H1 slope", h1.slope <= m, format!("{:.3} (≤ {m})", h1.slope)));
            }
            if let Some(m) = max_energy_slope {
                checks.push(Check::new("P1 energy slope", en.slope <= m, format!("{:.3} (≤ {m})", en.slope)));
            }
        }
        _ => {}
    }
    Ok(StudyReport {
        study: cfg.study.label().into(),
        checks,
        summary: serde_json::json!({
            "reference_energy": reference.energy,
            "points": points,
            "h1_fit": h1,
            "energy_fit": en,
        }),
    })
}

/// Mass-normalized uniform random vector.
pub fn random_state(model: &dyn EnergyModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = model.mass_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn verify_suite(cfg: &ExperimentConfig) -> Result<StudyReport> {
    let StudySpec::VerifySuite { random_fields, eig_pairs } = cfg.study else {
        unreachable!()
    };
    let space = cfg.space()?;
    let model = cfg.fem_model(space.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    let linear = matches!(model.params().kind, ModelKind::Linear);

    let mut worst_identity: f64 = 0.0;
    for _ in 0..random_fields {
        let u = random_state(&model, &mut rng);
        worst_identity = worst_identity.max(metric_identity_error(&model, &u)?);
    }
    checks.push(Check::new(
        "E'(u) = L_u u",
        worst_identity <= 1e-12,
        format!("max relative error {worst_identity:.2e} over {random_fields} fields"),
    ));

    let u0 = cfg.initial_field(space)?.interior();
    let v = random_state(&model, &mut rng);
    let steps = default_fd_steps();
    let fd = fd_gradient_check(&model, &u0, &v, &steps);
    let fh = fd_hessian_check(&model, &u0, &v, &steps)?;
    if linear {
        checks.push(Check::new(
            "FD gradient exact (quadratic energy)",
            fd.max_relative_mismatch() <= 1e-10,
            format!("max relative mismatch {:.2e}", fd.max_relative_mismatch()),
        ));
    } else {
        let s = fd.slope.unwrap_or(f64::NAN);
        checks.push(Check::new("FD gradient order", s >= 1.9, format!("slope {s:.3}")));
        let s = fh.slope.unwrap_or(f64::NAN);
        checks.push(Check::new("FD Hessian order", s >= 1.9, format!("slope {s:.3}")));
    }

    let w = random_state(&model, &mut rng);
    let h = model.hessian(&u0)?;
    let (hv, hw) = (h.apply(&v), h.apply(&w));
    let asym = (dot(&hv, &w) - dot(&v, &hw)).abs() / (norm2(&hv) * norm2(&w)).max(f64::MIN_POSITIVE);
    checks.push(Check::new("Hessian symmetry", asym <= 1e-12, format!("{asym:.2e}")));

    if model.flavor().is_complex() {
        let phases: Vec<f64> = (0..16).map(|k| 2.0 * std::f64::consts::PI * k as f64 / 16.0 + 0.1).collect();
        let err = phase_invariance_error(&model, &u0, &phases);
        checks.push(Check::new("phase invariance", err <= 1e-11, format!("{err:.2e}")));
    }

    if model.dim() <= DENSE_ORACLE_MAX_DIM.min(2000) {
        let dense = dense_eig_oracle(&model.l0().to_dense(), &model.mass().to_dense())?;
        let pairs = smallest_eigpairs(model.l0(), model.mass(), eig_pairs, 1e-10, None)?;
        let worst = pairs
            .iter()
            .zip(&dense.values)
            .map(|((l, _), d)| (l - d).abs() / d.abs().max(1.0))
            .fold(0.0, f64::max);
        checks.push(Check::new(
            "LOBPCG matches dense oracle",
            worst <= 1e-8,
            format!("max relative eigenvalue difference {worst:.2e}"),
        ));
    }
    Ok(StudyReport {
        study: "verify_suite".into(),
        checks,
        summary: serde_json::json!({
            "dim": model.dim(),
            "fd_gradient": fd,
            "fd_hessian": fh,
        }),
    })
}
