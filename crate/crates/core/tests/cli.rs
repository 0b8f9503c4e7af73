use std::fs;
use std::path::Path;

use jumpcouple::cli::{emit_plotdata, run, run_args, Command, ResultRecord};
use jumpcouple::config::{ExperimentConfig, Ini};

const OU: &str = "[model]
dim = 1
drift = linear
drift.rate = 1
sigma1 = 1

[scheme]
name = reflection

[run]
T = 1
dt = 0.001
n_paths = 200
seed = 3
x0 = -1
y0 = 1
record_every = 100
";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.ini");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn args(cmd: &str, cfg: &str, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v = vec!["jumpcouple".to_string(), cmd.to_string(), "--config".into(), cfg.to_string(), "--out".into(), out.display().to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), OU);
    assert_eq!(run_args(args("certify", &cfg, &dir.path().join("a"), &[])), 0);
    assert_eq!(run_args(args("simulate", &cfg, &dir.path().join("b"), &[])), 0);

    let bad = write_config(dir.path(), &OU.replace("dt = 0.001", "dt = fast"));
    assert_eq!(run_args(args("simulate", &bad, &dir.path().join("c"), &[])), 2);
    assert_eq!(run_args(["jumpcouple", "simulate"]), 2);
    assert_eq!(run_args(["jumpcouple", "frobnicate"]), 2);

    // a contraction claim for a non-contractive model must fail the check, not crash
    let flat = OU.replace("drift.rate = 1", "drift.rate = 0.0001").replace("sigma1 = 1", "sigma1 = 1\ncurvature = constant\ncurvature.value = 5");
    let flat = write_config(dir.path(), &flat);
    assert_eq!(run_args(args("contract", &flat, &dir.path().join("d"), &["--seed", "1"])), 1);
}

#[test]
fn missing_seed_is_a_config_error_unless_given_on_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &OU.replace("seed = 3\n", ""));
    assert_eq!(run_args(args("certify", &cfg, &dir.path().join("a"), &[])), 2);
    assert_eq!(run_args(args("certify", &cfg, &dir.path().join("b"), &["--seed", "5"])), 0);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{OU}\n[outputs]\ntraces = 2\n"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_args(args("simulate", &cfg, &a, &["--workers", "1"])), 0);
    assert_eq!(run_args(args("simulate", &cfg, &b, &["--workers", "3"])), 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).filter(|n| n.to_string_lossy().ends_with(".csv")).collect();
    names.sort();
    assert_eq!(names.len(), 3, "{names:?}");
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn json_record_is_key_sorted_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_ini(Ini::parse(OU, "ou.ini").unwrap(), None, None, Some(dir.path().to_path_buf())).unwrap();
    let rec = run(Command::Certify, &cfg).unwrap();
    assert!(rec.passed);
    let text = fs::read_to_string(dir.path().join("certify.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for k in ["experiment_id", "config_hash", "scalars", "series", "artifacts", "wall_time", "reports"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert_eq!(v["config_hash"].as_str().unwrap(), cfg.hash);
    assert!((v["scalars"]["c"].as_f64().unwrap() - 0.6).abs() < 1e-8);
    let table = fs::read_to_string(dir.path().join("distance.csv")).unwrap();
    assert!(table.starts_with("r,f,df,d2f\n"));
}

#[test]
fn empty_series_emit_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_ini(Ini::parse(OU, "ou.ini").unwrap(), None, None, Some(dir.path().to_path_buf())).unwrap();
    let mut rec: ResultRecord = run(Command::Certify, &cfg).unwrap();
    rec.series.clear();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(emit_plotdata(&rec, &empty).unwrap().is_empty());
    assert_eq!(fs::read_dir(&empty).unwrap().count(), 0);
}
