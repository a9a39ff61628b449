use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fslsim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fslsim"));
    c.env_remove("FSLSIM_SEED").env_remove("FSLSIM_OUT").env("RUST_LOG", "warn");
    c
}

fn bundled(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A bundled config shrunk to a few quick rounds on a small dataset.
fn small(name: &str, rounds: usize) -> Value {
    let mut v = bundled(name);
    v["dataset"]["n_train"] = json!(600);
    v["dataset"]["n_test"] = json!(200);
    v["rounds"] = json!(rounds);
    v["seeds"] = json!([3]);
    v
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    fslsim().args(args).output().unwrap()
}

fn summary(path: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn key<'a>(s: &'a [(String, String)], k: &str) -> &'a str {
    &s.iter().find(|(a, _)| a == k).unwrap_or_else(|| panic!("no {k}")).1
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small("blobs_cse_h1.json", 1);
    v["strategy"]["h"] = json!(0);
    let p = write(dir.path(), "bad.json", &v);
    let o = run(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("strategy.h"));

    let mut v = small("blobs_cse_h1.json", 1);
    v["batch_sz"] = json!(3);
    let p = write(dir.path(), "typo.json", &v);
    let o = run(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_sz"));

    let o = run(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    for layer in ["dense", "relu", "flatten", "conv2d"] {
        assert!(out.contains(layer), "{out}");
    }
    assert_eq!(run(&["gradcheck", "--inject-fault"]).status.code(), Some(3));
}

#[test]
fn diverging_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small("blobs_cse_h1.json", 5);
    v["eta0"] = json!(1e300);
    let p = write(dir.path(), "nan.json", &v);
    let o = run(&["run", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.json", &small("blobs_label_skew_partial.json", 4));
    let mut files = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        let o = run(&["run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(
            ["metrics.csv", "ledger.csv", "summary.txt"]
                .map(|f| std::fs::read(out.join("seed-3").join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn outputs_have_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.json", &small("blobs_cse_h5.json", 2));
    let out = dir.path().join("o");
    assert!(run(&["run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let metrics = std::fs::read_to_string(out.join("seed-3/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,epoch,comm_rounds,uplink_bytes,downlink_bytes,train_loss,test_top1,\
         grad_norm_client,grad_norm_server,gamma_T,weighted_avg_client,weighted_avg_server"
    );
    assert_eq!(lines.count(), 2);
    let ledger = std::fs::read_to_string(out.join("seed-3/ledger.csv")).unwrap();
    assert!(ledger.starts_with("round,client,direction,message_kind,bytes\n"));
    assert!(out.join("config.json").exists());
    let s = summary(&out.join("summary.txt"));
    assert_eq!(key(&s, "seeds"), "3");
}

#[test]
fn storage_matches_hand_count() {
    // dense 8->32 client, dense 32->3 aux, dense 32->32 + 32->3 server
    let (xc, ac, xs, n) = (8 * 32 + 32, 32 * 3 + 3, 32 * 32 + 32 + 32 * 3 + 3, 5);
    let expect = [
        ("blobs_cse_h1.json", n * (xc + ac) + xs),
        ("blobs_fsl_oc.json", n * xc + xs),
        ("blobs_fsl_mc.json", n * xc + n * xs),
        ("blobs_fsl_an.json", n * (xc + ac) + n * xs),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (name, want) in expect {
        let p = write(dir.path(), name, &small(name, 1));
        let out = dir.path().join(format!("out-{name}"));
        assert!(run(&["run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
        let s = summary(&out.join("seed-3/summary.txt"));
        assert_eq!(key(&s, "storage_params"), want.to_string(), "{name}");
    }
}

#[test]
fn fsl_oc_reports_default_clip() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small("blobs_fsl_oc.json", 1);
    v["strategy"].as_object_mut().unwrap().remove("clip_threshold");
    let p = write(dir.path(), "oc.json", &v);
    let out = dir.path().join("o");
    let o = fslsim()
        .env("RUST_LOG", "info")
        .args(["run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("clip_threshold"));
    let s = summary(&out.join("seed-3/summary.txt"));
    assert_eq!(key(&s, "clip_threshold"), "1");
}

#[test]
fn env_overrides_seed_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.json", &small("blobs_fsl_mc.json", 1));
    let out = dir.path().join("env-out");
    let o = fslsim()
        .env("FSLSIM_SEED", "11")
        .env("FSLSIM_OUT", &out)
        .args(["run", "--config", p.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed-11/metrics.csv").exists());
    assert!(!out.join("seed-3").exists());
}

#[test]
fn compare_merges_curves() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "h1.json", &small("blobs_cse_h1.json", 3));
    let b = write(dir.path(), "h5.json", &small("blobs_cse_h5.json", 3));
    let out = dir.path().join("cmp");
    let o = run(&[
        "compare",
        "--config",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "strategy,h,round,epoch,comm_rounds,total_bytes,test_top1");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let last = |h: &str| -> f64 {
        rows.iter().rfind(|r| r[1] == h).unwrap()[4].parse().unwrap()
    };
    assert!(last("5") < last("1"));
    assert!(out.join("CSE_FSL-h1/seed-3/metrics.csv").exists());

    let o = run(&["compare", "--config", a.to_str().unwrap(), a.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
