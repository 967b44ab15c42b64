use std::path::Path;
use std::process::{Command, Output};

fn vesselseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselseg"))
        .args(args)
        .output()
        .expect("spawn vesselseg")
}

fn ok(args: &[&str]) -> String {
    let out = vesselseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = vesselseg(&["phantom", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(vesselseg(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn validation_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "stride = 64\npatch_size = 16\n").unwrap();
    let out = vesselseg(&["preprocess", "--manifest", "missing.json", "--out", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = vesselseg(&["phantom", "--n", "1", "--size", "4", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let cache = d.join("cache");
    let run = d.join("run");
    let pred = d.join("pred");
    let cfg = d.join("train.toml");
    std::fs::write(
        &cfg,
        "patch_size = 8\nstride = 4\npatches_per_case = 2\nval_patches_per_case = 1\n[network]\nbase_channels = 2\ndepth = 1\n",
    )
    .unwrap();

    ok(&["phantom", "--n", "2", "--size", "32", "--out", p(&data)]);
    let manifest = data.join("manifest.json");
    assert!(manifest.exists() && data.join("run.json").exists());

    ok(&["preprocess", "--manifest", p(&manifest), "--out", p(&cache), "--config", p(&cfg)]);
    let cached = cache.join("manifest.json");

    ok(&["train", "--manifest", p(&cached), "--out", p(&run), "--config", p(&cfg), "--epochs", "1"]);
    for f in ["run.json", "train_log.jsonl", "last.ckpt", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(rec["config"]["epochs"], 1);
    assert!(rec["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));

    ok(&[
        "predict", "--checkpoint", p(&run.join("last.ckpt")), "--manifest", p(&cached), "--out", p(&pred),
        "--split", "all", "--mesh", "stl", "--save-prob",
    ]);
    assert!(pred.join("phantom_000.nii.gz").exists());

    let report = d.join("report.json");
    ok(&[
        "evaluate", "--pred-dir", p(&pred), "--manifest", p(&cached), "--out", p(&report), "--split", "all",
        "--gt", "full", "--roi", "full",
    ]);
    let md = ok(&["report", "--in", p(&report), "--format", "md"]);
    assert!(md.starts_with("| Metric | model |"));
    assert!(md.contains("| Surface Error (mm) |"));
    assert!(md.contains(" ± "));
    let csv = ok(&["report", "--in", p(&report), "--format", "csv"]);
    assert!(csv.starts_with("report,metric,mean,std,n"));

    let prov = ok(&["report", "--provenance", p(&run.join("run.json"))]);
    assert!(prov.contains("| learning_rate | 0.001 | published training setting |"));
    assert!(prov.contains("| epochs | 1 | user |"));
    assert!(prov.contains("| patch_size | 8 | user |"));

    // Replaying the run record reproduces the log exactly.
    let rerun = d.join("rerun");
    ok(&["train", "--from-run", p(&run.join("run.json")), "--out", p(&rerun)]);
    let strip = |path: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect()
    };
    assert_eq!(strip(&run.join("train_log.jsonl")), strip(&rerun.join("train_log.jsonl")));
}
