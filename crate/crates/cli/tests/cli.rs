use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synth30.toml");

fn vcvote(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcvote"))
        .current_dir(config.parent().unwrap())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Copies the shipped fixture config into `root/configs` so its relative
/// paths land inside `root`.
fn fixture_in(root: &Path) -> PathBuf {
    let dir = root.join("configs");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("synth30.toml");
    std::fs::copy(FIXTURE, &path).unwrap();
    path
}

fn run_pipeline(config: &Path, workers: &str) {
    ok(vcvote(config, &["--workers", workers, "synth"]));
    ok(vcvote(config, &["--workers", workers, "train"]));
    ok(vcvote(config, &["--workers", workers, "eval"]));
    ok(vcvote(config, &["--workers", workers, "encode"]));
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn shipped_fixture_runs_end_to_end_and_is_worker_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = fixture_in(a.path());
    let cb = fixture_in(b.path());
    run_pipeline(&ca, "4");
    run_pipeline(&cb, "1");

    let data_a = a.path().join("data/synth30");
    let data_b = b.path().join("data/synth30");
    for sub in ["models", "reports", "features"] {
        let fa = files_under(&data_a.join(sub));
        assert!(!fa.is_empty(), "{sub} is empty");
        assert_eq!(fa, files_under(&data_b.join(sub)), "{sub} differs between worker counts");
    }

    let csv = std::fs::read_to_string(data_a.join("reports/benchmark.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,part,method,scale_mode,ap"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // Five parts, four levels, two methods, two scale modes.
    assert_eq!(rows.len(), 5 * 4 * 2 * 2);
    let ap = |level: &str, part: &str, method: &str, mode: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == level && r[1] == part && r[2] == method && r[3] == mode)
            .map(|r| r[4].parse().unwrap())
            .expect("row present")
    };
    for r in &rows {
        if r[2] == "voting" {
            let single = ap(r[0], r[1], "single_concept", r[3]);
            let voting: f64 = r[4].parse().unwrap();
            assert!(voting >= single, "row {r:?}: voting {voting} < single {single}");
        }
    }

    let inspect = ok(vcvote(&ca, &["inspect", "--concept", "0", "--part", "0"]));
    let v: serde_json::Value = serde_json::from_str(&inspect).unwrap();
    assert!(v["concepts"].as_u64().unwrap() > 0);
    assert!(v["pair"]["lambda"].is_array());
    for name in ["activation.json", "codes.jsonl", "concepts.json", "benchmark.json"] {
        assert!(data_a.join("reports").join(name).is_file(), "{name} missing");
    }
}

#[test]
fn detect_finds_annotated_parts_and_stale_models_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("small.toml"),
        "seed = 11\n[synth]\nn_train = 8\n[train]\nK = 24\n[detect]\ncalibration_scenes = 4\n[eval]\nn_scenes = 4\nlevels = [0]\n",
    )
    .unwrap();
    let cfg = root.join("small.toml");
    ok(vcvote(&cfg, &["synth"]));
    ok(vcvote(&cfg, &["train"]));

    let out = ok(vcvote(&cfg, &["detect", "features/train-0.fmap"]));
    let dets: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!dets.is_empty());
    assert!(dets.iter().all(|d| d["image_id"] == "train-0" && d["score"].as_f64().unwrap() > 0.0));

    let pooled = root.join("pooled.jsonl");
    ok(vcvote(
        &cfg,
        &["detect", "--pyramid", "--output", pooled.to_str().unwrap(), "features/train-0.fmap", "features/train-1.fmap"],
    ));
    assert!(std::fs::read_to_string(&pooled).unwrap().lines().count() > 0);

    let stale = vcvote(&cfg, &["--seed", "12", "eval"]);
    assert_eq!(stale.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&stale.stderr).contains("stale"));
    ok(vcvote(&cfg, &["--seed", "12", "eval", "--allow-stale"]));

    // Rewriting an input with other content makes the models stale as well.
    let ann = root.join("annotations.json");
    let original = std::fs::read_to_string(&ann).unwrap();
    std::fs::write(&ann, format!("{original}\n")).unwrap();
    assert_eq!(vcvote(&cfg, &["eval"]).status.code(), Some(2));
    std::fs::write(&ann, original).unwrap();
    ok(vcvote(&cfg, &["eval"]));
}

#[test]
fn same_seed_gives_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, "seed = 5\n[synth]\nn_train = 6\n[train]\nK = 16\n[detect]\nthreshold = 0.0\n").unwrap();
    ok(vcvote(&cfg, &["synth"]));
    ok(vcvote(&cfg, &["train"]));
    let first = std::fs::read(dir.path().join("models/manifest.json")).unwrap();
    ok(vcvote(&cfg, &["train"]));
    assert_eq!(first, std::fs::read(dir.path().join("models/manifest.json")).unwrap());
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");

    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = vcvote(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("annotations.json"));

    std::fs::write(&cfg, "[synth]\nn_train = 3\n").unwrap();
    assert_eq!(vcvote(&cfg, &["synth"]).status.code(), Some(2), "seed is mandatory");

    std::fs::write(&cfg, "seed = 1\n[detect]\nbeta = 1.5\n").unwrap();
    assert_eq!(vcvote(&cfg, &["synth"]).status.code(), Some(2));

    assert_eq!(vcvote(&dir.path().join("missing.toml"), &["synth"]).status.code(), Some(2));
    assert_eq!(vcvote(&cfg, &["no-such-command"]).status.code(), Some(2));
}
