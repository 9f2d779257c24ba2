use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hero_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hero-lab")).args(args).output().unwrap()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, rule: &str, trainer_extra: &str, epochs: usize) -> PathBuf {
    let path = dir.join(name);
    fs::write(
        &path,
        format!(
            r#"{{
  "schema_version": 1,
  "model": {{"kind": "mlp", "widths": [2, 16, 4], "input_shape": [2], "classes": 4}},
  "data": {{"source": "synthetic", "kind": "gaussians", "train_size": 400, "test_size": 200}},
  "trainer": {{"rule": "{rule}", "epochs": {epochs}, "batch_size": 32{trainer_extra}}},
  "diagnostics": {{"hessian_interval": 5}},
  "seed": 7,
  "output_dir": "out-{name}"
}}"#
        ),
    )
    .unwrap();
    path
}

fn last_row(csv_path: &Path) -> Vec<(String, String)> {
    let text = fs::read_to_string(csv_path).unwrap();
    let header: Vec<String> = text.lines().next().unwrap().split(',').map(String::from).collect();
    let last: Vec<String> = text.lines().last().unwrap().split(',').map(String::from).collect();
    header.into_iter().zip(last).collect()
}

fn field(row: &[(String, String)], key: &str) -> f64 {
    row.iter().find(|(k, _)| k == key).unwrap().1.parse().unwrap()
}

#[test]
fn sgd_separates_gaussians() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sgd.json", "sgd", "", 20);
    let out = hero_lab(&["train", "--config", path_arg(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out-sgd.json");
    for name in ["metrics.csv", "checkpoint.bin", "config.resolved.json", "quant_sweep.csv"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let row = last_row(&run.join("metrics.csv"));
    assert_eq!(field(&row, "epoch"), 20.0);
    assert!(field(&row, "train_acc") >= 0.99, "{row:?}");
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hero.json", "hero", r#", "h": 0.05"#, 4);
    assert!(hero_lab(&["train", "--config", path_arg(&cfg)]).status.success());
    let run = dir.path().join("out-hero.json");
    let first = fs::read(run.join("metrics.csv")).unwrap();
    let resolved = dir.path().join("resolved.json");
    fs::copy(run.join("config.resolved.json"), &resolved).unwrap();
    assert!(hero_lab(&["train", "--config", path_arg(&resolved)]).status.success());
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), first);
    assert_eq!(fs::read(run.join("config.resolved.json")).unwrap(), fs::read(&resolved).unwrap());
}

#[test]
fn config_errors_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "hero", r#", "h": 0.0, "lr": -1.0"#, 0);
    let out = hero_lab(&["train", "--config", path_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("trainer.h"), "{err}");
    assert!(err.contains("trainer.lr"), "{err}");
    assert!(err.contains("trainer.epochs"), "{err}");
    assert!(!dir.path().join("out-bad.json").exists());
}

#[test]
fn unknown_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.json", "hero", r#", "gama": 0.1"#, 2);
    let out = hero_lab(&["train", "--config", path_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gama"));
}

#[test]
fn divergence_is_a_numerical_abort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "nan.json", "sgd", r#", "lr": 1e200"#, 3);
    let out = hero_lab(&["train", "--config", path_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bound_check_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    let out = hero_lab(&["bound-check", "--trials", "0", "--out", path_arg(&empty)]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("trials 0 violations 0"));

    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = hero_lab(&["bound-check", "--trials", "25", "--dim-max", "5", "--seed", "3", "--out", path_arg(p)]);
        assert!(out.status.success());
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn quant_sweep_contour_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let sgd = write_config(dir.path(), "a.json", "sgd", "", 3);
    let hero = write_config(dir.path(), "b.json", "hero", r#", "h": 0.05"#, 3);
    assert!(hero_lab(&["train", "--config", path_arg(&sgd)]).status.success());
    let checkpoint = dir.path().join("out-a.json/checkpoint.bin");

    let sweep = dir.path().join("sweep.csv");
    let out = hero_lab(&["quant-sweep", "--checkpoint", path_arg(&checkpoint), "--bits", "2..16", "--out", path_arg(&sweep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&sweep).unwrap();
    let bits: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(bits.len(), 16);
    assert_eq!((bits[0], bits[1], bits[15]), ("0", "2", "16"));

    let out = hero_lab(&["quant-sweep", "--checkpoint", path_arg(&checkpoint), "--bits", "1..4"]);
    assert_eq!(out.status.code(), Some(2));

    let contour = dir.path().join("contour.csv");
    let out = hero_lab(&["contour", "--checkpoint", path_arg(&checkpoint), "--steps", "5", "--out", path_arg(&contour)]);
    assert!(out.status.success());
    let text = fs::read_to_string(&contour).unwrap();
    assert_eq!(text.lines().next().unwrap(), "a,b,loss");
    assert_eq!(text.lines().count(), 26);
    let out = hero_lab(&["contour", "--checkpoint", path_arg(&checkpoint), "--steps", "4"]);
    assert_eq!(out.status.code(), Some(2));

    let table = dir.path().join("table.csv");
    let out = hero_lab(&["compare", "--configs", path_arg(&sgd), path_arg(&hero), "--out", path_arg(&table)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].ends_with("acc_2bit,acc_3bit,acc_4bit,acc_6bit,acc_8bit"));
    assert!(rows[1].contains(",sgd,7,"));
    assert!(rows[2].contains(",hero,7,"));
}
