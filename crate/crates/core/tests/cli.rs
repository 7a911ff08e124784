use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn run(args: &[&str], config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorfocus"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A generated benchmark with a trained checkpoint, shared by read-only tests.
fn prepared() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        for c in ["gen", "train"] {
            let o = run(&[c], &tiny(), d.path(), &[]);
            assert!(o.status.success(), "{c}: {}", stderr(&o));
        }
        d
    })
    .path()
}

/// Runs against the shared benchmark and checkpoint, writing into a fresh dir.
fn run_on_prepared(args: &[&str], extra: &[&str]) -> (TempDir, Output) {
    let out = tempfile::tempdir().unwrap();
    let data = prepared();
    let ck = data.join("checkpoint.bin");
    let mut all = vec!["--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()];
    all.extend_from_slice(extra);
    let o = run(args, &tiny(), out.path(), &all);
    (out, o)
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{}\n{extra}", std::fs::read_to_string(tiny()).unwrap())).unwrap();
    p
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = run(&["train"], &cfg, d.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_1_and_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("nowhere.toml");
    let o = run(&["gen"], &cfg, d.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.toml"), "{}", stderr(&o));
}

#[test]
fn missing_benchmark_exits_2_and_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train"], &tiny(), d.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("world.bin"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["ablate", "everything"], &tiny(), d.path(), &[]).status.code(), Some(1));
    assert_eq!(run(&["gen"], &tiny(), d.path(), &["--subsets", "shoes"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports_every_tensor() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], &tiny(), d.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&d.path().join("gradcheck.csv"));
    assert!(rows.len() > 10);
    assert!(rows.iter().any(|r| r.starts_with("caam.probes")));
}

#[test]
fn failing_gradcheck_exits_3() {
    let d = tempfile::tempdir().unwrap();
    // No finite-difference estimate meets a zero tolerance.
    let cfg = write_config(d.path(), "[gradcheck]\ntolerance = 0.0\n");
    let o = run(&["gradcheck"], &cfg, d.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_log_has_one_row_per_epoch_and_outputs_carry_the_hash() {
    let dir = prepared();
    assert_eq!(csv_rows(&dir.join("train_log.csv")).len(), 2);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("train_manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for f in ["stats.csv", "train_log.csv"] {
        assert!(
            std::fs::read_to_string(dir.join(f)).unwrap().starts_with(&format!("# config_hash={hash}")),
            "{f}"
        );
    }
    for f in ["gen_config.json", "train_config.json"] {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(f)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{f}");
    }
}

#[test]
fn leave_one_subset_out_training_uses_only_the_named_subset() {
    let out = tempfile::tempdir().unwrap();
    let data = prepared();
    let o = run(&["train"], &tiny(), out.path(), &["--data", data.to_str().unwrap(), "--subsets", "car"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("train_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subsets"], serde_json::json!(["car"]));
    assert_eq!(m["instances"].as_array().unwrap().len(), 1);

    // The held-out subset still evaluates with the new checkpoint.
    let ck = out.path().join("checkpoint.bin");
    let o = run(
        &["eval"],
        &tiny(),
        out.path(),
        &["--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--subsets", "fashion"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(r["subsets"].as_array().unwrap().len(), 1);
    assert_eq!(r["subsets"][0]["subset"], "fashion");
}

#[test]
fn eval_writes_consistent_metrics() {
    let (out, o) = run_on_prepared(&["eval"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("metrics.json")).unwrap()).unwrap();
    for s in r["subsets"].as_array().unwrap() {
        let r1 = s["r_at_1"].as_f64().unwrap();
        assert!(r1 <= s["rid_at_1"].as_f64().unwrap());
        assert!(r1 <= s["r_at_5"].as_f64().unwrap());
    }
}

#[test]
fn beta_ablation_has_one_row_per_grid_point_plus_adaptive() {
    let (out, o) = run_on_prepared(&["ablate", "beta"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out.path().join("ablate_beta.csv")).len(), 3 + 1);
    let (out, o) = run_on_prepared(&["ablate", "beta"], &["--betas", "0,0.5,1,2,8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out.path().join("ablate_beta.csv")).len(), 5 + 1);
}

#[test]
fn robustness_ablation_ends_with_the_no_box_row() {
    let (out, o) = run_on_prepared(&["ablate", "robustness"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out.path().join("ablate_robustness.csv"));
    assert_eq!(rows.len(), 5 + 1);
    assert!(rows.last().unwrap().starts_with("no bbox"));
}

#[test]
fn seed_flag_changes_the_benchmark() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(&["gen"], &tiny(), a.path(), &["--seed", "11"]).status.success());
    assert!(run(&["gen"], &tiny(), b.path(), &["--seed", "12"]).status.success());
    let f = Path::new("fashion").join("gallery.jsonl");
    assert_ne!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
}
