use std::path::Path;
use std::process::{Command, Output};

fn mdgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const SMALL: &str = r#"
name = "tiny_gpe"
seed = 7

[model]
kind = "gpe"
beta = 20.0
potential = { type = "harmonic", omega_x = 2.0, omega_y = 2.0 }

[mesh]
domain = [-2.0, 2.0, -2.0, 2.0]
n = 8
order = 1

[solver]
schemes = ["mdrgm", "gfdn"]

[study]
kind = "iteration_comparison"
residual_tol = 1e-5
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn runs_a_study_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = mdgs(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("all checks passed"), "{text}");
    for f in ["report.txt", "report.json", "manifest.json", "summary.csv", "trace_mdrgm.csv", "trace_gfdn.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["passed"], true);
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(mdgs(&["run", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(mdgs(&["run", &cfg, "--out", b.to_str().unwrap(), "--threads", "1"]).status.success());
    for f in ["trace_mdrgm.csv", "trace_gfdn.csv", "summary.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    for body in [
        "name = \"x\"\n[model]\nkind = \"nonsense\"\n[mesh]\nn = 4\n[study]\nkind = \"single_solve\"\n",
        &SMALL.replace("order = 1", "order = 3"),
        &SMALL.replace("beta = 20.0", "beta = 20.0\nunknown_key = 1"),
        &SMALL.replace("\"gfdn\"", "\"newton\""),
    ] {
        let cfg = write_config(dir.path(), body);
        let o = mdgs(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    }
    let o = mdgs(&["run", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_prints_build_id() {
    let o = mdgs(&["version"]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).trim().is_empty());
}
