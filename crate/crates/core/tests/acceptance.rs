//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `MDGS_ACCEPTANCE_ONLY=1,6` restricts the run to the listed criteria.
//! The process exits nonzero on a failed criterion only with
//! `MDGS_ACCEPTANCE_STRICT=1`; otherwise failures are reported and the run
//! counts as completed.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use mdgs::eigen::{dense_eig_oracle, smallest_eigpairs};
use mdgs::experiment::{
    comparison_checks, fine_reference, fit_points, linear_contraction, lod_points, p1_points,
    random_state, second_order_checks, trace_extremes, Check, ExperimentConfig, RatePoint,
    SchemeResult, StudySpec,
};
use mdgs::field::{Field, Flavor, Layout};
use mdgs::lod::{
    assemble_coarse_model, build_model_basis, component_operator, compute_component_corrector,
    default_layers, lod_ground_state, TwoLevelMesh,
};
use mdgs::mesh::{Mesh, Rect};
use mdgs::models::{constant, identity_coef, EnergyModel, FemModel, ModelParams};
use mdgs::solvers::{solve_ground_state, GroundState, IterationTrace, Scheme};
use mdgs::space::FeSpace;
use mdgs::verify::{
    check_second_order, default_fd_steps, fd_gradient_check, fixed_point_defects,
    metric_identity_error, phase_invariance_error,
};
use mdgs::vecops::dot;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Lines = Vec<String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml")))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
        .0
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache")
}

fn record(lines: &mut Lines, c: &Check) -> bool {
    lines.push(format!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail));
    c.passed
}

fn all(lines: &mut Lines, checks: &[Check]) -> bool {
    checks.iter().fold(true, |acc, c| record(lines, c) && acc)
}

fn space(rect: Rect, n: usize, order: usize) -> Arc<FeSpace> {
    Arc::new(FeSpace::new(Mesh::new(rect, n, n).unwrap(), order).unwrap())
}

fn c1(lines: &mut Lines) -> bool {
    let cfg = load("linear_unit_square");
    let sp = cfg.space().unwrap();
    let model = cfg.fem_model(sp.clone()).unwrap();
    let u0 = cfg.initial_field(sp).unwrap().interior();
    let lc = linear_contraction(&model, &u0, &cfg.solver_config(Scheme::InverseIteration)).unwrap();
    let target = lc.lambda1 / lc.lambda2;
    let (obs, dev) = lc.asymptotic_ratio();
    lines.push(format!(
        "ratios: {}",
        lc.ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" ")
    ));
    all(
        lines,
        &[
            Check::new("error ratios tend to λ₁/λ₂", dev <= 0.02, format!("observed {obs:.4}, λ₁/λ₂ = {target:.4}, deviation {dev:.4}")),
            Check::new("discrete λ₁/λ₂ near 0.4", (target - 0.4).abs() <= 0.02, format!("{target:.5}")),
        ],
    )
}

fn trace_ok(lines: &mut Lines, label: &str, trace: &IterationTrace) -> bool {
    let (inc, mass) = trace_extremes(trace);
    record(
        lines,
        &Check::new(
            label,
            inc <= 1e-13 && mass >= 1.0 - 1e-12,
            format!("{} steps, max ΔE {inc:.2e}, min ‖u_prel‖ − 1 = {:.2e}", trace.records.len() - 1, mass - 1.0),
        ),
    )
}

fn c2(lines: &mut Lines) -> bool {
    let mut ok = true;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    entries.sort();
    for path in entries {
        let (mut cfg, _) = ExperimentConfig::load(&path).unwrap();
        let name = cfg.name.clone();
        match cfg.study.clone() {
            StudySpec::LodRateStudy { .. } | StudySpec::P1RateStudy { .. } => {
                cfg.mesh.n = cfg.mesh.n.min(32);
                let fine = cfg.space().unwrap();
                let model = Arc::new(cfg.fem_model(fine.clone()).unwrap());
                let u0 = cfg.initial_field(fine.clone()).unwrap().interior();
                let cfg_m = cfg.solver_config(Scheme::Mdrgm);
                match solve_ground_state(&*model, &u0, &cfg_m) {
                    Ok(gs) => ok &= trace_ok(lines, &format!("{name} fine reference"), &gs.trace),
                    Err(e) => ok &= record(lines, &Check::new(format!("{name} fine reference"), false, e.to_string())),
                }
                let coarse = space(cfg.rect(), 8, 1);
                if matches!(cfg.study, StudySpec::LodRateStudy { .. }) {
                    let tl = TwoLevelMesh::from_spaces(coarse, fine.clone()).unwrap();
                    let l = default_layers(tl.coarse_h(), cfg.rect().side());
                    let basis = build_model_basis(&tl, &model, Some(l)).unwrap();
                    let red = assemble_coarse_model(model.clone(), &basis).unwrap();
                    match lod_ground_state(&red, &u0, &cfg_m) {
                        Ok(gs) => ok &= trace_ok(lines, &format!("{name} LOD H/side=1/8"), &gs.coarse.trace),
                        Err(e) => ok &= record(lines, &Check::new(format!("{name} LOD"), false, e.to_string())),
                    }
                } else {
                    let cm = cfg.fem_model(coarse.clone()).unwrap();
                    let cu0 = cfg.initial_field(coarse).unwrap().interior();
                    match solve_ground_state(&cm, &cu0, &cfg_m) {
                        Ok(gs) => ok &= trace_ok(lines, &format!("{name} P1 H/side=1/8"), &gs.trace),
                        Err(e) => ok &= record(lines, &Check::new(format!("{name} P1"), false, e.to_string())),
                    }
                }
            }
            _ => {
                cfg.mesh.n = cfg.mesh.n.min(if cfg.mesh.order == 2 { 8 } else { 16 });
                let sp = cfg.space().unwrap();
                let model = cfg.fem_model(sp.clone()).unwrap();
                let u0 = cfg.initial_field(sp).unwrap().interior();
                for &s in &cfg.solver.schemes {
                    let label = format!("{name} n={} {}", cfg.mesh.n, s.label());
                    match solve_ground_state(&model, &u0, &cfg.solver_config(s)) {
                        Ok(gs) => ok &= trace_ok(lines, &label, &gs.trace),
                        Err(e) => ok &= record(lines, &Check::new(label, false, e.to_string())),
                    }
                }
            }
        }
    }
    ok
}

struct DeskRun {
    model: FemModel,
    states: Vec<(Scheme, GroundState)>,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = load("so_bec_desk");
        let sp = cfg.space().unwrap();
        let model = cfg.fem_model(sp.clone()).unwrap();
        let u0 = cfg.initial_field(sp).unwrap().interior();
        let states = [Scheme::Mdrgm, Scheme::InverseIteration, Scheme::Gfdn]
            .into_iter()
            .map(|s| {
                let t = Instant::now();
                let gs = solve_ground_state(&model, &u0, &cfg.solver_config(s)).unwrap();
                println!("    [desk run] {} finished in {:.0?}", s.label(), t.elapsed());
                (s, gs)
            })
            .collect();
        DeskRun { model, states }
    })
}

fn c3(lines: &mut Lines) -> bool {
    let run = desk_run();
    let mut ok = true;
    let mut results = Vec::new();
    for (s, gs) in &run.states {
        lines.push(format!(
            "{:8} iterations {:5}  E = {:.12}  λ = {:.12}",
            s.label(),
            gs.iterations,
            gs.energy,
            gs.lambda
        ));
        ok &= record(lines, &Check::new(format!("{} converged at 1e-11", s.label()), gs.converged, format!("{} iterations", gs.iterations)));
        results.push((*s, SchemeResult {
            method: s.label().into(),
            iterations: gs.iterations,
            energy: gs.energy,
            lambda: gs.lambda,
            converged: gs.converged,
            residual_max: gs.residual.residual_max,
        }));
    }
    all(lines, &comparison_checks(&results, true, 0.7, 1e-6)) && ok
}

fn c4(lines: &mut Lines) -> bool {
    let run = desk_run();
    let mut ok = true;
    for (s, gs) in &run.states {
        match check_second_order(&run.model, &gs.u, 3) {
            Ok(rep) => {
                lines.push(format!(
                    "{:8} eigs {:?} (LOBPCG {} iterations, phase-mode distance {:.1e})",
                    s.label(),
                    rep.tangent_eigs,
                    rep.eigen_iterations,
                    rep.phase_mode_distance.unwrap_or(f64::NAN)
                ));
                ok &= all(lines, &second_order_checks(s.label(), &rep, 1e-7, 1e-5, 0.1));
            }
            Err(e) => ok &= record(lines, &Check::new(format!("{} second order", s.label()), false, e.to_string())),
        }
    }
    ok
}

fn rate_lines(lines: &mut Lines, label: &str, pts: &[RatePoint]) {
    for p in pts {
        lines.push(format!(
            "{label} H/side = {:<8} ℓ = {:>2}  it {:5}  H¹ err {:.4e}  energy err {:.4e}",
            p.h_ratio,
            p.layers.map_or("-".into(), |l| l.to_string()),
            p.iterations,
            p.errors.h1,
            p.errors.energy
        ));
    }
}

fn c5(lines: &mut Lines) -> bool {
    let cfg = load("lod_rate_so_bec");
    let p1cfg = load("p1_rate_so_bec");
    let cache = cache_dir();
    let reference = fine_reference(&cfg, Some(&cache)).unwrap();
    lines.push(format!("fine P1 reference ({} cells): E = {:.12}", cfg.mesh.n, reference.energy));
    let StudySpec::LodRateStudy { ratios, fit_points: nfit, .. } = &cfg.study else { unreachable!() };
    let lod = lod_points(&cfg, &reference, ratios, cfg.study.layer_rule(), Some(&cache)).unwrap();
    rate_lines(lines, "LOD", &lod);
    let StudySpec::P1RateStudy { ratios: pr, fit_points: pfit, .. } = &p1cfg.study else { unreachable!() };
    let p1 = p1_points(&p1cfg, &reference, pr).unwrap();
    rate_lines(lines, "P1 ", &p1);
    let (lh, le) = fit_points(&lod, *nfit).unwrap();
    let (ph, pe) = fit_points(&p1, *pfit).unwrap();
    all(
        lines,
        &[
            Check::new("LOD H¹ slope ≥ 2.3", lh.slope >= 2.3, format!("{:.3} (segments {:?})", lh.slope, lh.segment_slopes)),
            Check::new("LOD energy slope ≥ 5.0", le.slope >= 5.0, format!("{:.3} (segments {:?})", le.slope, le.segment_slopes)),
            Check::new("P1 H¹ slope ≤ 1.5", ph.slope <= 1.5, format!("{:.3}", ph.slope)),
            Check::new("P1 energy slope ≤ 2.5", pe.slope <= 2.5, format!("{:.3}", pe.slope)),
        ],
    )
}

fn so_bec_model(n: usize, order: usize) -> (FemModel, Vec<f64>) {
    let sp = space(Rect::centered_square(1.0), n, order);
    let model = FemModel::new(ModelParams::so_bec_reference(), sp.clone(), Flavor::ComplexSpinor).unwrap();
    let u0 = Field::interpolate(sp, Flavor::ComplexSpinor, &|x: [f64; 2]| {
        let a = (x[0] - 1.0).powi(2) * (x[1] - 1.0).powi(2);
        let ph = Complex64::new(0.0, -(x[0] * x[0] + x[1] * x[1]) / 2.0).exp();
        [ph * (0.5 * a), ph * a]
    })
    .normalize_l2()
    .unwrap()
    .interior();
    (model, u0)
}

fn gpe_model(n: usize, order: usize, flavor: Flavor) -> (FemModel, Vec<f64>) {
    let sp = space(Rect::unit_square(), n, order);
    let model = FemModel::new(
        ModelParams::gpe(identity_coef(), Arc::new(|x: [f64; 2]| 10.0 * (x[0] * x[0] + x[1] * x[1])), 100.0),
        sp.clone(),
        flavor,
    )
    .unwrap();
    let u0 = Field::interpolate(sp, flavor, &|x: [f64; 2]| {
        let b = x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]);
        [Complex64::from_polar(b, 3.0 * x[0]), Complex64::new(0.0, 0.0)]
    })
    .normalize_l2()
    .unwrap()
    .interior();
    (model, u0)
}

fn linear_model(n: usize, order: usize, flavor: Flavor) -> FemModel {
    FemModel::new(
        ModelParams::linear(identity_coef(), constant(0.0)),
        space(Rect::unit_square(), n, order),
        flavor,
    )
    .unwrap()
}

fn c6(lines: &mut Lines) -> bool {
    let mut ok = true;
    // Eigensolver against the dense oracle.
    let mut cases: Vec<(String, FemModel)> = Vec::new();
    for (n, o) in [(8, 1), (16, 1), (32, 1), (8, 2), (16, 2)] {
        cases.push((format!("linear P{o} n={n}"), linear_model(n, o, Flavor::RealScalar)));
    }
    for (n, o) in [(8, 1), (16, 1), (4, 2), (8, 2)] {
        cases.push((format!("so_bec L₀ P{o} n={n}"), so_bec_model(n, o).0));
    }
    let cb = ModelParams::gpe(
        Arc::new(|x: [f64; 2]| {
            let v = if ((x[0] * 8.0).floor() as i64 + (x[1] * 8.0).floor() as i64) % 2 == 0 { 1.0 } else { 10.0 };
            [[v, 0.0], [0.0, v]]
        }),
        constant(0.0),
        1.0,
    );
    cases.push(("checkerboard P1 n=32".into(), FemModel::new(cb, space(Rect::unit_square(), 32, 1), Flavor::RealScalar).unwrap()));
    let mut worst: f64 = 0.0;
    for (label, m) in &cases {
        assert!(m.dim() <= 2000);
        let dense = dense_eig_oracle(&m.l0().to_dense(), &m.mass().to_dense()).unwrap();
        let pairs = smallest_eigpairs(m.l0(), m.mass(), 4, 1e-9, None).unwrap();
        let err = pairs
            .iter()
            .zip(&dense.values)
            .map(|((l, _), d)| (l - d).abs() / d.abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        lines.push(format!("{label:24} dim {:5}  max rel eigenvalue diff {err:.2e}", m.dim()));
    }
    ok &= record(lines, &Check::new("LOBPCG = dense oracle (≤ 2000 DOF)", worst <= 1e-8, format!("{worst:.2e}")));

    // Finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let steps = default_fd_steps();
    let (gpe, gu) = gpe_model(8, 2, Flavor::ComplexScalar);
    let (sob, su) = so_bec_model(8, 2);
    let lin = linear_model(16, 2, Flavor::RealScalar);
    for (label, m, u) in [("gpe", &gpe as &dyn EnergyModel, gu.clone()), ("so_bec", &sob, su.clone())] {
        let v = random_state(m, &mut rng);
        let fd = fd_gradient_check(m, &u, &v, &steps);
        let s = fd.slope.unwrap_or(f64::NAN);
        ok &= record(lines, &Check::new(format!("FD gradient order, {label}"), s >= 1.9, format!("slope {s:.3}, mismatches {:?}", fd.mismatches.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>())));
    }
    let lu = random_state(&lin, &mut rng);
    let v = random_state(&lin, &mut rng);
    let fd = fd_gradient_check(&lin, &lu, &v, &steps);
    ok &= record(lines, &Check::new("FD gradient exact, linear", fd.max_relative_mismatch() <= 1e-10, format!("{:.2e}", fd.max_relative_mismatch())));

    // Metric identity on random fields.
    for (label, m) in [("linear", &lin as &dyn EnergyModel), ("gpe", &gpe), ("so_bec", &sob)] {
        let worst = (0..50)
            .map(|_| metric_identity_error(m, &random_state(m, &mut rng)).unwrap())
            .fold(0.0, f64::max);
        ok &= record(lines, &Check::new(format!("E′(u) = L_u u, {label}"), worst <= 1e-12, format!("max rel {worst:.2e} over 50 fields")));
    }
    ok
}

fn c7(lines: &mut Lines) -> bool {
    let rect = Rect::centered_square(1.0);
    let tl = TwoLevelMesh::new(rect, 8, 64, 1).unwrap();
    let model = FemModel::new(ModelParams::so_bec_reference(), tl.fine().clone(), Flavor::ComplexSpinor).unwrap();
    let l = default_layers(tl.coarse_h(), rect.side());
    let basis = build_model_basis(&tl, &model, Some(l)).unwrap();
    let fl = model.layout();
    let cl = Layout::new(fl.flavor, tl.coarse().n_interior());
    let mut worst: f64 = 0.0;
    for j in 0..basis.n_columns() {
        let col = basis.column(j);
        for s in 0..fl.slots() {
            let p = tl.l2_project(&fl.gather_slot(s, &col)).unwrap();
            for (z, v) in p.iter().enumerate() {
                let e = if cl.slot_index(s, z) == j { 1.0 } else { 0.0 };
                worst = worst.max((v - e).abs());
            }
        }
    }
    // Coarse vertex (2,2): the patch stays smaller than the domain up to ℓ = 4.
    let z = 7 + 1;
    let a = component_operator(&model, 0);
    let global = compute_component_corrector(&tl, &a, 2, z, None).unwrap();
    let errs: Vec<f64> = (1..=4)
        .map(|l| {
            let c = compute_component_corrector(&tl, &a, 2, z, Some(l)).unwrap();
            let d: Vec<f64> = c.iter().zip(&global).map(|(x, y)| x - y).collect();
            dot(&d, &a.matvec(&d)).sqrt()
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[1] / w[0]).collect();
    let p1 = Layout::new(fl.flavor, tl.coarse().n_interior()).dim();
    all(
        lines,
        &[
            Check::new(
                "P_H(column) = coarse unit",
                worst <= 1e-9,
                format!("max deviation {worst:.2e} over {} columns × {} slots (ℓ = {l})", basis.n_columns(), fl.slots()),
            ),
            Check::new(
                "truncation error decays ≤ 0.7 per layer",
                ratios.iter().all(|r| *r <= 0.7),
                format!("errors {:?}, ratios {ratios:.3?}", errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()),
            ),
            Check::new(
                "dim LOD = dim P1",
                basis.n_columns() == p1 && basis.matrix().nrows() == fl.dim(),
                format!("{} columns, coarse P1 spinor space has {p1} unknowns", basis.n_columns()),
            ),
        ],
    )
}

fn c8(lines: &mut Lines) -> bool {
    let mut ok = true;
    let phases: Vec<f64> = (0..16).map(|k| 2.0 * std::f64::consts::PI * k as f64 / 16.0 + 0.1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (sob, su) = so_bec_model(8, 2);
    let (gpe, gu) = gpe_model(8, 2, Flavor::ComplexScalar);
    for (label, m, u) in [("so_bec", &sob as &dyn EnergyModel, su), ("gpe", &gpe, gu)] {
        let r = random_state(m, &mut rng);
        let err = phase_invariance_error(m, &u, &phases).max(phase_invariance_error(m, &r, &phases));
        ok &= record(lines, &Check::new(format!("phase invariance, {label}"), err <= 1e-11, format!("max relative change {err:.2e}")));
    }

    // Exact discrete eigenpairs of quadratic energies.
    let exact = |m: &FemModel| -> Vec<f64> {
        let d = dense_eig_oracle(&m.l0().to_dense(), &m.mass().to_dense()).unwrap();
        let v: Vec<f64> = d.vectors.column(0).iter().cloned().collect();
        let n = m.mass_norm(&v);
        v.into_iter().map(|x| x / n).collect()
    };
    let lin = linear_model(16, 1, Flavor::RealScalar);
    let linc = linear_model(8, 2, Flavor::ComplexScalar);
    let so0 = FemModel::new(
        ModelParams::so_bec_reference().without_interaction(),
        space(Rect::centered_square(1.0), 4, 2),
        Flavor::ComplexSpinor,
    )
    .unwrap();
    for (label, m) in [("linear real", &lin), ("linear complex", &linc), ("so_bec β=0", &so0)] {
        let mut u = exact(m);
        if m.flavor().is_complex() {
            u = m.layout().rotate_phase(&u, 0.7);
        }
        let fp = fixed_point_defects(m, &u, 0.7, 1.0).unwrap();
        ok &= record(
            lines,
            &Check::new(
                format!("fixed point, {label}"),
                fp.max() <= 1e-9,
                format!("MDRGM {:.1e}, InvIter {:.1e}, GFDN {:.1e}", fp.mdrgm, fp.inverse_iteration, fp.gfdn),
            ),
        );
    }
    ok
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MDGS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn(&mut Lines) -> bool); 8] = [
        (1, "linear spectral-gap rate", c1),
        (2, "energy dissipation and mass growth", c2),
        (3, "SO-BEC desk reproduction (n=64 P2)", c3),
        (4, "optimality certification", c4),
        (5, "LOD superconvergence", c5),
        (6, "oracle equivalences", c6),
        (7, "LOD structural invariants", c7),
        (8, "phase invariance and fixed points", c8),
    ];
    let mut failed = Vec::new();
    for (id, title, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let mut lines = Vec::new();
        let passed = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut lines))) {
            Ok(p) => p,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                lines.push(format!("panicked: {msg}"));
                false
            }
        };
        for l in &lines {
            println!("    {l}");
        }
        println!(
            "{} criterion {id}: {title} ({:.1?})",
            if passed { "PASS" } else { "FAIL" },
            t.elapsed()
        );
        if !passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var("MDGS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
