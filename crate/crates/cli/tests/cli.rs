use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flattenet"))
        .args(args)
        .env("FLATTENET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(include_str!("../../core/configs/table1.json")).unwrap();
    edit(&mut v);
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn describe_head_counts() {
    let o = run(&["describe", "--backbone", "none", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["total_params"], 229_376);
    assert_eq!(v["total_macs"], 13_762_560);
    let o = run(&["describe", "--config", "table7", "--backbone", "none", "--format", "json"]);
    assert_eq!(json(&o)["total_params"], 1_404_928);
}

#[test]
fn describe_unknown_config_is_usage_error() {
    let o = run(&["describe", "--config", "no-such-config"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-config"));
}

#[test]
fn selftest_clean_passes() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn selftest_names_sparse_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "tampered.json", |v| {
        v["name"] = "tampered".into();
        v["layers"][0]["g2"] = 1.into();
    });
    let o = run(&["selftest", "--config", &p]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    let line = out.lines().find(|l| l.contains("tampered: layer 0 density")).expect("density row");
    assert!(line.contains("FAIL"), "{line}");
}

#[test]
fn selftest_indivisible_groups_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "bad.json", |v| v["layers"][0]["g3"] = 3.into());
    let o = run(&["selftest", "--config", &p]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
}

#[test]
fn gradcheck_all_within_tolerance() {
    let o = run(&["gradcheck", "--all", "--dtype", "f64", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let reports = json(&o);
    let reports = reports.as_array().unwrap();
    assert!(reports.len() >= 60);
    for r in reports {
        assert!(r["max_rel_err"].as_f64().unwrap() <= 1e-4, "{r}");
    }
}

#[test]
fn gradcheck_usage_errors() {
    assert_eq!(code(&run(&["gradcheck"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--op", "nope"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--all", "--dtype", "f32"])), 2);
}

#[test]
fn dump_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for dtype in ["f32", "f64"] {
        let a = dir.path().join(format!("a_{dtype}.flt1"));
        let b = dir.path().join(format!("b_{dtype}.flt1"));
        let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());
        assert_eq!(code(&run(&["dump", a_s, "--dims", "2,3,4,5", "--seed", "7", "--dtype", dtype])), 0);
        let o = run(&["load", a_s, "--out", b_s, "--format", "json"]);
        assert_eq!(code(&o), 0);
        assert_eq!(json(&o)["dims"], serde_json::json!([2, 3, 4, 5]));
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn load_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.flt1");
    std::fs::write(&p, b"FLT0 not a tensor").unwrap();
    assert_eq!(code(&run(&["load", p.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["load", dir.path().join("missing").to_str().unwrap()])), 2);
}

#[test]
fn train_requires_seed() {
    assert_eq!(code(&run(&["train", "--epochs", "1"])), 2);
}

#[test]
fn train_is_deterministic_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &outs {
        let o = run(&[
            "train", "--seed", "1", "--epochs", "2", "--steps", "2", "--batch", "2", "--eval-size", "2", "--dtype", "f32", "--quiet",
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    let hist = read(&outs[0].join("history.jsonl"));
    assert_eq!(hist, read(&outs[1].join("history.jsonl")));
    assert_eq!(String::from_utf8_lossy(&hist).lines().count(), 2);
    for f in ["checkpoint/params.flt1", "checkpoint/manifest.json"] {
        assert_eq!(read(&outs[0].join(f)), read(&outs[1].join(f)), "{f}");
    }
    let o = run(&["eval", outs[0].to_str().unwrap(), "--dtype", "f32", "--eval-size", "2", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json(&o)["loss"].as_f64().unwrap().is_finite());
    // checkpoint dtype must match
    assert_eq!(code(&run(&["eval", outs[0].to_str().unwrap(), "--dtype", "f64"])), 2);
}
