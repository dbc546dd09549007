use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn icm(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_icm")).current_dir(dir).args(args).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(icm(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(icm(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(icm(dir.path(), &["datagen", "--group", "nonsense"]).status.code(), Some(1));
    let out = icm(dir.path(), &["eval", "--checkpoint", "missing.bin", "--set", "a=missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("out/eval.meta.json").exists());
    assert_ne!(json(&dir.path().join("out/eval.meta.json"))["status"], "ok");
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"datasett": {}}"#).unwrap();
    assert_eq!(icm(dir.path(), &["datagen", "--config", "bad.json"]).status.code(), Some(1));
}

#[test]
fn datagen_enumerates_fields_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = icm_core::dataset::DatagenConfig {
        seed: 2,
        materials: vec![icm_core::dataset::MaterialGroup {
            rule: icm_core::materials::SubsetRule::PolynomialA,
            count: 5,
            normalize: true,
            first_index: 0,
        }],
        geometries: vec![icm_core::discretization::GeometrySpec {
            side: 1.0,
            holes: vec![icm_core::discretization::Hole::circle(0.5, 0.5, 0.2)],
            h: 0.15,
        }],
        programs: vec![icm_core::solver::LoadProgram::new(icm_core::solver::LoadingMode::Uniaxial, 0.2, 0.0, 3).unwrap()],
        prefix: "s".into(),
    };
    std::fs::write(dir.path().join("small.json"), serde_json::to_vec(&serde_json::json!({ "dataset": cfg })).unwrap()).unwrap();
    for out in ["a", "b"] {
        let o = icm(dir.path(), &["datagen", "--config", "small.json", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = json(&dir.path().join("a/datagen_summary.json"));
    let b = json(&dir.path().join("b/datagen_summary.json"));
    assert_eq!(a, b);
    let (_, ds) = icm_core::dataset::read_dataset(&dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(ds.materials.len(), 5);
    assert_eq!(ds.materials.iter().map(|m| m.fields.len()).sum::<usize>(), 15);

    // a different seed changes the data
    let o = icm(dir.path(), &["datagen", "--config", "small.json", "--seed", "3", "--out", "c"]);
    assert!(o.status.success());
    assert_ne!(json(&dir.path().join("c/datagen_summary.json")), a);
}

#[test]
fn oracle_eval_and_token_dump() {
    let dir = tempfile::tempdir().unwrap();
    assert!(icm(dir.path(), &["datagen", "--group", "polynomial-b:2", "--load-steps", "2", "--out", "d"]).status.success());
    let o = icm(dir.path(), &["eval", "--oracle", "--set", "d=d", "--out", "e"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("e/eval.json"));
    assert_eq!(r["predictor"], "oracle");
    assert!(r["sets"][0]["report"]["geo_mean_s_err"].as_f64().unwrap() < 1e-8);
    assert!(dir.path().join("e/errors.csv").exists());

    assert!(icm(dir.path(), &["dump-tokens", "--dataset", "d", "--material", "1", "--out", "t"]).status.success());
    let dumped = std::fs::read_dir(dir.path().join("t")).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "icmt")).count();
    assert_eq!(dumped, 1);
}

#[test]
fn diffusion_demo_reports_small_residual() {
    let dir = tempfile::tempdir().unwrap();
    let o = icm(dir.path(), &["diffusion-demo", "--steps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("out/diffusion_report.json"));
    assert!(r["max_relative_residual"].as_f64().unwrap() < 1e-8);
    assert!(r["wrong_model_residual"].as_f64().unwrap() > 1e-3);
    assert_eq!(icm(dir.path(), &["diffusion-demo", "--oracle"]).status.code(), Some(1));
}
