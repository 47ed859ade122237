use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcgm::diagnostics::{read_dic, BETA_FILE, COEF_FILE, DIC_FILE, EDGES_FILE, LATENT_FILE, SUMMARY_FILE};

fn gcgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcgm")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, missing_rate: f64) -> Output {
    let scenario = dir.join("scenario.json");
    let cfg = serde_json::json!({
        "k": 3, "p": 4, "n_k": 60, "variant": "intercepts+prox", "alpha": [-0.3],
        "beta": [0.6], "n_covariates": 1, "missing_rate": missing_rate, "n_sweeps": 20, "seed": 12
    });
    std::fs::write(&scenario, cfg.to_string()).unwrap();
    gcgm(&["simulate", "--scenario", s(&scenario), "--out", s(&dir.join("input"))])
}

fn fit(dir: &Path, variant: &str, name: &str, with_prox: bool) -> (Output, PathBuf) {
    let input = dir.join("input");
    let out = dir.join(name);
    let (data, schema, prox) = (input.join("survey.csv"), input.join("schema.json"), input.join("proximity.csv"));
    let mut args = vec![
        "fit", "--data", s(&data), "--schema", s(&schema), "--variant", variant, "--iters", "200", "--burnin", "50",
        "--seed", "3", "--deviance-draws", "8", "--out", s(&out),
    ];
    if with_prox {
        args.extend(["--proximity", s(&prox)]);
    }
    (gcgm(&args), out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fit_writes_the_summary_bundle() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), 0.05).status.success());
    let (o, out) = fit(dir.path(), "full", "run", true);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [EDGES_FILE, COEF_FILE, LATENT_FILE, BETA_FILE, DIC_FILE, SUMMARY_FILE, "marginals.json", "trace_params.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let edges = std::fs::read_to_string(out.join(EDGES_FILE)).unwrap();
    assert_eq!(edges.lines().count(), 4);
    assert_eq!(edges.lines().next().unwrap().split(',').count(), 1 + 6);
    assert!(read_dic(&out.join(DIC_FILE)).unwrap().dic.is_finite());

    let o = gcgm(&["summarize", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("DIC"));
}

#[test]
fn proximity_variant_without_proximity_exits_with_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), 0.0).status.success());
    let (o, _) = fit(dir.path(), "int+prox", "run", false);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--proximity"), "{}", stderr(&o));
}

#[test]
fn missing_rate_must_be_below_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simulate(dir.path(), 1.0).status.code(), Some(1));
    let o = simulate(dir.path(), 0.99);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("input/truth.json").exists());
}

#[test]
fn compare_ranks_runs_by_dic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), 0.0).status.success());
    let (a, run_a) = fit(dir.path(), "int", "a", false);
    let (b, run_b) = fit(dir.path(), "int+prox", "b", true);
    assert!(a.status.success() && b.status.success());

    let o = gcgm(&["compare", s(&run_a), s(&run_b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    let (da, db) = (read_dic(&run_a.join(DIC_FILE)).unwrap().dic, read_dic(&run_b.join(DIC_FILE)).unwrap().dic);
    let best = if da <= db { "intercepts" } else { "intercepts+prox" };
    let first = table.lines().find(|l| l.starts_with('*')).unwrap();
    assert!(first.split_whitespace().any(|w| w == best), "{table}");

    assert_eq!(gcgm(&["compare", s(&run_a)]).status.code(), Some(1));
    std::fs::remove_file(run_b.join(DIC_FILE)).unwrap();
    let o = gcgm(&["compare", s(&run_a), s(&run_b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(DIC_FILE), "{}", stderr(&o));
}

#[test]
fn repeated_fits_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), 0.05).status.success());
    let (_, a) = fit(dir.path(), "int+prox", "a", true);
    let (_, b) = fit(dir.path(), "int+prox", "b", true);
    for f in [EDGES_FILE, BETA_FILE, DIC_FILE, SUMMARY_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn help_and_describe() {
    let o = gcgm(&["fit", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[default: 50000]"));
    assert_eq!(gcgm(&["fit", "--bogus"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), 0.1).status.success());
    let input = dir.path().join("input");
    let o = gcgm(&["describe", "--data", s(&input.join("survey.csv")), "--schema", s(&input.join("schema.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object());
}
