use std::path::Path;
use std::process::{Command, Output};

use connectome_cli::pipeline::{RunMetrics, METRICS_FILE};
use connectome_cli::store::read_graphs;
use connectome_gnn::io::read_json;

fn connectome(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_connectome"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CONNECTOME_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, subjects: usize) {
    let n = subjects.to_string();
    ok(&connectome(&["synth", "--out", "cohort", "--subjects", &n, "--sites", "3", "--timepoints", "60"], dir));
}

const FAST: [&str; 6] = ["--arch", "gcn-baseline", "--copies", "1", "--epochs", "2"];

#[test]
fn build_graphs_on_400_subjects_at_116_rois() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["synth", "--out", "cohort", "--subjects", "400", "--rois", "116", "--timepoints", "40"];
    ok(&connectome(&args, d));
    let stdout = ok(&connectome(&["build-graphs", "--manifest", "cohort/manifest.jsonl", "--out", "store"], d));
    assert!(stdout.contains("built 400 graphs; edges min/mean/max 1334/1334.0/1334"), "{stdout}");
    let graphs = read_graphs(&d.join("store/graphs")).unwrap();
    assert_eq!(graphs.len(), 400);
    assert!(graphs.iter().all(|g| g.edges().len() == 1334 && g.node_count() == 116));

    let stdout = ok(&connectome(&["split", "--manifest", "cohort/manifest.jsonl", "--out", "store", "--seed", "1"], d));
    assert_eq!(stdout.trim(), "train 280 / val 60 / test 60");
}

#[test]
fn empty_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.jsonl"), "\n").unwrap();
    let out = connectome(&["build-graphs", "--manifest", "m.jsonl", "--out", "store"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty manifest"));
}

#[test]
fn unreadable_subject_is_listed_and_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 10);
    std::fs::remove_file(d.join("cohort/timeseries/sub-0003.csv")).unwrap();
    let out = connectome(&["build-graphs", "--manifest", "cohort/manifest.jsonl", "--out", "store"], d);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("failed sub-0003"), "{stderr}");
    assert!(stderr.contains("1 of 10 subjects failed"), "{stderr}");
    assert_eq!(read_graphs(&d.join("store/graphs")).unwrap().len(), 9);
}

#[test]
fn zero_epochs_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = connectome(&["pipeline", "--synthetic", "--out", "run", "--epochs", "0"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs must be at least 1"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn flag_beats_config_file_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 20);
    std::fs::write(
        d.join("cfg.json"),
        r#"{"manifest": "cohort/manifest.jsonl", "epochs": 4, "lr": 0.01, "seed": 5, "copies": 1}"#,
    )
    .unwrap();
    let args = ["train", "--config", "cfg.json", "--out", "run", "--epochs", "1", "--arch", "gcn-baseline"];
    ok(&connectome(&args, d));
    let cfg: serde_json::Value = read_json(&d.join("run/config.json")).unwrap();
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["lr"], 0.01);
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["batch_size"], 16);
    assert_eq!(cfg["members"], 1);
    assert!(d.join("run/checkpoints/member_0.ckpt").exists());
    assert!(d.join("run/history/member_0.csv").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 20);
    let run = |env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_connectome"));
        cmd.args(["train", "--manifest", "cohort/manifest.jsonl", "--out", out])
            .args(FAST)
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .env_remove("CONNECTOME_SEED");
        if let Some(v) = env {
            cmd.env("CONNECTOME_SEED", v);
        }
        ok(&cmd.output().unwrap());
        let cfg: serde_json::Value = read_json(&d.join(out).join("config.json")).unwrap();
        cfg["seed"].as_u64().unwrap()
    };
    assert_eq!(run(Some("31"), "a"), 31);
    assert_eq!(run(None, "b"), 0);
}

#[test]
fn pipeline_rerun_from_echoed_config_is_identical_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 20);
    let mut args = vec!["pipeline", "--manifest", "cohort/manifest.jsonl", "--out", "one", "--seed", "3", "--jobs", "1"];
    args.extend_from_slice(&FAST);
    ok(&connectome(&args, d));
    ok(&connectome(&["pipeline", "--config", "one/config.json", "--out", "two"], d));
    let a = std::fs::read(d.join("one").join(METRICS_FILE)).unwrap();
    assert_eq!(a, std::fs::read(d.join("two").join(METRICS_FILE)).unwrap());
    for f in ["checkpoints/member_0.ckpt", "split.json", "history/member_0.csv"] {
        assert_eq!(std::fs::read(d.join("one").join(f)).unwrap(), std::fs::read(d.join("two").join(f)).unwrap(), "{f}");
    }
    let m: RunMetrics = read_json(&d.join("one").join(METRICS_FILE)).unwrap();
    assert_eq!(m.counts.train_pool, 2 * m.counts.train);
    assert_eq!(m.counts.train + m.counts.val + m.counts.test, 20);

    let eval = ok(&connectome(
        &["evaluate", "--checkpoint", "one/checkpoints", "--manifest", "cohort/manifest.jsonl", "--split", "one/split.json", "--out", "one"],
        d,
    ));
    let report: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(report["accuracy"], serde_json::to_value(m.test.accuracy).unwrap());

    let stdout = ok(&connectome(&["report", "--run", "one", "--run", "two", "--out", "tables"], d));
    assert!(stdout.contains("phases.csv") && stdout.contains("training_curves.csv"));
    let phases = std::fs::read_to_string(d.join("tables/phases.csv")).unwrap();
    assert!(phases.starts_with("run,architecture,members,set,accuracy,precision,recall,auc,n\n"));
    assert!(phases.contains("one,gcn_baseline,1,test,"));
    let curves = std::fs::read_to_string(d.join("tables/training_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
}

#[test]
fn explain_writes_masks_and_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 20);
    let mut args = vec!["train", "--manifest", "cohort/manifest.jsonl", "--out", "run"];
    args.extend_from_slice(&FAST);
    ok(&connectome(&args, d));
    let stdout = ok(&connectome(
        &[
            "explain",
            "--checkpoint",
            "run/checkpoints/member_0.ckpt",
            "--manifest",
            "cohort/manifest.jsonl",
            "--split",
            "run/split.json",
            "--out",
            "run",
            "--explain-steps",
            "5",
        ],
        d,
    ));
    assert!(stdout.starts_with("explained "), "{stdout}");
    let cohort = std::fs::read_to_string(d.join("run/explain/saliency_cohort.csv")).unwrap();
    assert!(cohort.starts_with("rank,roi_index,roi_label,percentage,score\n"));
    assert_eq!(cohort.lines().count(), 40);
    let masks: Vec<_> = std::fs::read_dir(d.join("run/explain/edge_masks")).unwrap().collect();
    assert!(!masks.is_empty());
}
