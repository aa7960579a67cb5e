use std::path::Path;
use std::process::{Command, Output};

use marginkd::data::Dataset;
use marginkd::pipeline::{stage1, stage2, RunDir, Stage, TrainConfig};

const BIN: &str = env!("CARGO_BIN_EXE_marginkd");

fn marginkd(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MARGINKD_RUN_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: &[&str] = &[
    "--k", "3", "--teacher-arch", "hidden:6", "--teacher-epochs", "4", "--student-epochs", "4",
    "--stage2-epochs", "2", "--stage2-lr", "0.02",
];

fn synth(dir: &Path) {
    let o = marginkd(&["synth", "--classes", "6", "--dim", "12", "--n", "240", "--seed", "7", "--out", p(dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn synth_writes_dataset_and_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = marginkd(&["synth", "--classes", "8", "--dim", "64", "--n", "2000", "--seed", "7", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1);
    let ds = Dataset::load_jsonl(&tmp.path().join("dataset.jsonl"), 64).unwrap();
    assert_eq!((ds.len(), ds.num_classes(), ds.num_features()), (2000, 8, 64));
}

#[test]
fn full_run_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let dataset = data.join("dataset.jsonl");

    let mut args = vec!["stage1", "--data", p(&dataset), "--delta", "0.05", "--tau", "1.0", "--out", p(&run)];
    args.extend_from_slice(FAST);
    let o = marginkd(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("stage1:"));
    for f in ["config.json", "foldplan.json", "softlabels.csv", "metrics_stage1.json", "dataset.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    for k in 0..3 {
        assert!(run.join(format!("checkpoints/teacher_{k}.json")).exists());
        assert!(run.join(format!("checkpoints/student_stage1_{k}.json")).exists());
    }
    let header = std::fs::read_to_string(run.join("softlabels.csv")).unwrap();
    assert!(header.starts_with("id,fold,tau,p_0,"));

    let o = marginkd(&["select", "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("selection_0.json").exists());

    let o = marginkd(&["stage2", "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("metrics_stage2.json").exists());
    assert!(run.join("checkpoints/student_stage2_2.json").exists());

    let o = marginkd(&["report", "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("report: MAP@3"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"].as_array().unwrap().len(), 4);

    let metrics_out = tmp.path().join("eval.json");
    let o = marginkd(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoints/student_stage2_0.json")),
        "--data",
        p(&dataset),
        "--out",
        p(&metrics_out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(metrics_out.exists());
}

#[test]
fn cli_and_library_agree() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let dataset = tmp.path().join("dataset.jsonl");
    let run = tmp.path().join("run");
    let mut args = vec!["stage1", "--data", p(&dataset), "--out", p(&run), "--jobs", "2"];
    args.extend_from_slice(FAST);
    assert_eq!(marginkd(&args).status.code(), Some(0));
    assert_eq!(marginkd(&["stage2", "--run", p(&run)]).status.code(), Some(0));

    let ds = Dataset::load_jsonl(&dataset, 64).unwrap();
    let rd = RunDir::new(&run);
    let cfg: TrainConfig = rd.load_config().unwrap();
    let a1 = stage1(&ds, &cfg, 1).unwrap();
    let a2 = stage2(&a1, &ds, &cfg, 1).unwrap();
    assert_eq!(rd.load_stage1(&ds).unwrap(), a1);
    let m2 = rd.load_metrics(Stage::Two).unwrap();
    assert_eq!(m2.per_fold, a2.metrics_per_fold);
    assert_eq!(m2.summary, a2.summary);
}

#[test]
fn select_without_cache_exits_2_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let run = tmp.path().join("run");
    let data = tmp.path().join("dataset.jsonl");
    let mut args = vec!["stage1", "--data", p(&data), "--out", p(&run)];
    args.extend_from_slice(FAST);
    assert_eq!(marginkd(&args).status.code(), Some(0));
    std::fs::remove_file(run.join("softlabels.csv")).unwrap();
    let o = marginkd(&["select", "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("softlabels.csv"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
}

#[test]
fn report_without_stage2_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let run = tmp.path().join("run");
    let data = tmp.path().join("dataset.jsonl");
    let mut args = vec!["stage1", "--data", p(&data), "--out", p(&run)];
    args.extend_from_slice(FAST);
    assert_eq!(marginkd(&args).status.code(), Some(0));
    let o = marginkd(&["report", "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("metrics_stage2.json"));
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let data = tmp.path().join("dataset.jsonl");
    assert_eq!(marginkd(&["stage1", "--data", p(&data), "--bogus"]).status.code(), Some(1));
    let o = marginkd(&["stage1", "--data", p(&data), "--delta", "1.5", "--out", p(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("delta"));
    let o = marginkd(&["stage1", "--data", p(&data), "--k", "1", "--out", p(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_data_file_exits_2() {
    let o = marginkd(&["stage1", "--data", "/nonexistent/dataset.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/dataset.jsonl"));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = marginkd(&[
        "stage1",
        "--data",
        p(&tmp.path().join("dataset.jsonl")),
        "--k",
        "2",
        "--teacher-arch",
        "linear",
        "--lr-teacher",
        "1e308",
        "--max-grad-norm",
        "0",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("teacher"));
}

#[test]
fn help_lists_every_flag() {
    let o = marginkd(&["stage1", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let help = stdout(&o);
    for flag in [
        "--data", "--dim", "--teacher-arch", "--student-arch", "--k", "--tau", "--delta", "--alpha", "--beta",
        "--gamma", "--lr-teacher", "--lr-student", "--stage2-lr", "--max-grad-norm", "--teacher-epochs",
        "--student-epochs", "--stage2-epochs", "--batch-size", "--seed", "--scheme", "--teacher-signal",
        "--out", "--jobs",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    assert!(help.contains("[default: 0.05]"));
    assert!(help.contains("[default: 5]"));
}

#[test]
fn run_root_environment_variable_sets_default_output() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["synth", "--classes", "4", "--dim", "8", "--n", "80"])
        .env("MARGINKD_RUN_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tmp.path().join("synth/dataset.jsonl").exists());
}

#[test]
fn sweep_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = tmp.path().join("sweep");
    let data = tmp.path().join("dataset.jsonl");
    let mut args = vec![
        "sweep",
        "--data",
        p(&data),
        "--deltas",
        "0.01,0.05,0.1",
        "--weights",
        "1,0,0",
        "--weights",
        "0.33,0.33,0.34",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(FAST);
    let o = marginkd(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(out.join("kfold_tables.txt").exists());

    let o = marginkd(&["report", "--run", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    let scores: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(" | ").nth(6).unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 6);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
}
