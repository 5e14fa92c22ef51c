use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn organloc<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_organloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn gen(out: &Path, n: usize, seed: u64) -> Output {
    organloc(&["phantom", "gen", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", &p(out)])
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "train": {"total_steps": 12, "batch_size": 2, "channels": [4, 8, 16], "rng_seed": 1},
        "eval": {"train_fraction": 0.75, "eval_fraction": 0.25},
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

/// Generates and simulates `n` cases; returns the depth directory.
fn dataset(root: &Path, n: usize) -> PathBuf {
    let ph = root.join("phantoms");
    let depth = root.join("depth");
    assert_eq!(code(&gen(&ph, n, 5)), 0);
    let o = organloc(&["depth", "sim", "--manifest", &p(&ph.join("manifest.csv")), "--out", &p(&depth)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    depth
}

#[test]
fn phantom_gen_writes_cases_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&gen(&out, 3, 7)), 0);
    let names: Vec<String> = sorted_files(&out)
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 7);
    assert!(names.contains(&"manifest.csv".to_string()));
    assert!(names.contains(&"case_00002.dvol".to_string()));
    assert!(names.contains(&"case_00002_labels.dvol".to_string()));
}

#[test]
fn phantom_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&gen(&a, 2, 9)), 0);
    assert_eq!(code(&gen(&b, 2, 9)), 0);
    for (fa, fb) in sorted_files(&a).iter().zip(sorted_files(&b)) {
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&organloc(&["phantom", "gen", "--n", "2"])), 2);
    assert_eq!(code(&organloc(&["phantom", "gen", "--out", "x", "--dims", "4,4"])), 2);
    assert_eq!(code(&organloc(&["train"])), 2);
    assert_eq!(code(&organloc(&["no-such-command"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&organloc(&["train", "--config", &p(&missing)])), 2);
}

#[test]
fn depth_sim_records_pipeline_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let depth = dataset(dir.path(), 2);
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(depth.join("pipeline.json")).unwrap()).unwrap();
    assert_eq!(record["binarize_threshold"].as_f64().unwrap() as f32, 0.02f32);
    assert_eq!(record["far_suppress_threshold"].as_f64().unwrap() as f32, 0.3f32);
    assert!(record["config_digest"].is_string());
    let before: Vec<Vec<u8>> = sorted_files(&depth).iter().map(|f| std::fs::read(f).unwrap()).collect();
    let ph = dir.path().join("phantoms");
    let o = organloc(&["depth", "sim", "--manifest", &p(&ph.join("manifest.csv")), "--out", &p(&depth)]);
    assert_eq!(code(&o), 0);
    let after: Vec<Vec<u8>> = sorted_files(&depth).iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn depth_sim_lists_corrupt_cases() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("phantoms");
    assert_eq!(code(&gen(&ph, 3, 4)), 0);
    let victim = ph.join("case_00001.dvol");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let o = organloc(&["depth", "sim", "--manifest", &p(&ph.join("manifest.csv")), "--out", &p(&dir.path().join("depth"))]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("case_00001"), "{err}");
    assert!(!err.contains("case_00000:"), "{err}");
}

#[test]
fn train_limit_selects_prefix_and_evaluate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let depth = dataset(dir.path(), 8);
    let cfg = small_config(dir.path());
    let run = |limit: &str, out: &str| {
        let o = organloc(&[
            "train", "--config", &p(&cfg), "--data", &p(&depth), "--out", &p(&dir.path().join(out)), "--limit", limit,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let rec: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(out).join("run.json")).unwrap()).unwrap();
        rec["case_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    let small = run("3", "r3");
    let large = run("6", "r6");
    assert_eq!(small.len(), 3);
    assert_eq!(large.len(), 6);
    assert_eq!(small[..], large[..3]);

    let too_many = organloc(&["train", "--config", &p(&cfg), "--data", &p(&depth), "--out", &p(&dir.path().join("rx")), "--limit", "99"]);
    assert_eq!(code(&too_many), 1);

    let out = dir.path().join("r6");
    let o = organloc(&[
        "evaluate", "--checkpoint", &p(&out.join("checkpoint.dckp")), "--config", &p(&cfg), "--data", &p(&depth),
        "--gt-alt", &p(&depth), "--out", &p(&out), "--sanity",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "case_id,organ,dice,assd_mm,doe_mm,detected");
    // 2 held-out cases, 11 organs each.
    assert_eq!(lines.count(), 22);
    assert!(out.join("report_alt.csv").exists());
    let agg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["primary"]["organs"].as_array().unwrap().len(), 11);
    assert_eq!(agg["alt"]["organs"].as_array().unwrap().len(), 11);
    assert_eq!(agg["primary"], agg["alt"]);

    // A checkpoint whose architecture differs from the config is rejected.
    let other = serde_json::json!({"train": {"channels": [8, 16, 32]}, "eval": {"train_fraction": 0.75, "eval_fraction": 0.25}});
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let o = organloc(&["evaluate", "--checkpoint", &p(&out.join("checkpoint.dckp")), "--config", &p(&other_path), "--data", &p(&depth)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn scaling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let depth = dataset(dir.path(), 20);
    let cfg = small_config(dir.path());
    // Same output path both times: the config digest covers it.
    let run = |out: &str| {
        let _ = std::fs::remove_dir_all(dir.path().join(out));
        let o = organloc(&[
            "scaling", "--config", &p(&cfg), "--sizes", "3,6,12", "--data", &p(&depth), "--out", &p(&dir.path().join(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read_to_string(dir.path().join(out).join("scaling.csv")).unwrap(),
            std::fs::read(dir.path().join(out).join("wilcoxon.json")).unwrap(),
        )
    };
    let (csv_a, json_a) = run("a");
    let (csv_b, json_b) = run("a");
    assert_eq!(csv_a, csv_b);
    assert_eq!(json_a, json_b);
    let mut lines = csv_a.lines();
    assert_eq!(lines.next().unwrap(), "n_train,dice_mean,dice_std,assd_mean,assd_std,doe_p95");
    assert_eq!(lines.count(), 3);
    let rec: serde_json::Value = serde_json::from_slice(&json_a).unwrap();
    assert_eq!(rec["comparisons"].as_array().unwrap().len(), 2);
}
