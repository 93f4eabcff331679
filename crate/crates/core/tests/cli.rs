use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ctvit(args: &[&str]) -> Output {
    ctvit_env(args, &[])
}

fn ctvit_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctvit"));
    cmd.args(args).env_remove("CTVIT_OUT_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic tree plus a briefly trained toy model.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    weights: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let out = ctvit(&[
        "synth", "--out", s(&data), "--train", "3", "3", "--validation", "1", "1", "--test", "2", "2", "--slices",
        "6", "--size", "32", "--seed", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = root.join("run");
    let out = ctvit(&[
        "train", "--data", s(&data), "--model", "toy", "--out", s(&run), "--epochs", "100", "--max-steps", "40",
        "--batch-size", "12", "--seed", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let weights = run.join("best.vitw");
    assert!(weights.is_file());
    assert!(run.join("epoch_001.vitw").is_file());
    Fixture {
        _dir: dir,
        root,
        data,
        weights,
    }
}

#[test]
fn pipeline_outputs_are_deterministic_and_well_formed() {
    let f = fixture();
    let log = std::fs::read_to_string(f.root.join("run/train_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "loss", "accuracy", "precision", "recall"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }

    let a = f.root.join("a.csv");
    let b = f.root.join("b.csv");
    let out = ctvit(&["predict", "--weights", s(&f.weights), "--data", s(&f.data), "--partition", "test", "--out", s(&a)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = ctvit(&[
        "predict", "--weights", s(&f.weights), "--data", s(&f.data), "--partition", "test", "--out", s(&b), "--threads",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let text = String::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("patient_id,slice_id,p_covid,predicted_label"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 4 * 6);
    for row in &rows {
        let p: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    let eval = f.root.join("eval");
    let out = ctvit(&["evaluate", "--predictions", s(&a), "--labels", s(&f.data), "--out", s(&eval)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&std::fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    for key in [
        "accuracy", "precision_covid", "recall_covid", "f1_covid", "precision_noncovid", "recall_noncovid",
        "f1_noncovid", "macro_f1_eq2", "macro_f1_classwise", "weighted_f1", "ci_radius", "n", "z", "degenerate",
    ] {
        assert!(report.get(key).is_some(), "{key} missing");
    }
    assert_eq!(report["n"], 4);
    let confusion = std::fs::read_to_string(eval.join("confusion.csv")).unwrap();
    assert!(confusion.starts_with("predicted,actual_COVID,actual_NonCOVID\n"));

    let sweep = f.root.join("sweep");
    let out = ctvit(&["sweep", "--predictions", s(&a), "--labels", s(&f.data), "--out", s(&sweep)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 19);
}

#[test]
fn corrupt_slice_is_skipped_and_missing_weights_rejected() {
    let f = fixture();
    let victim = f.data.join("test/covid/test_covid_000/3.png");
    std::fs::write(&victim, b"not a png").unwrap();
    let csv = f.root.join("p.csv");
    let out = ctvit(&["predict", "--weights", s(&f.weights), "--data", s(&f.data), "--partition", "test", "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("skipped 1 unreadable"), "{}", stderr(&out));
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(rows, 4 * 6 - 1);

    let out = ctvit(&[
        "predict", "--weights", s(&f.root.join("missing.vitw")), "--data", s(&f.data), "--out", s(&csv),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.vitw"));

    let empty = f.root.join("empty");
    std::fs::create_dir_all(empty.join("test")).unwrap();
    let out = ctvit(&["predict", "--weights", s(&f.weights), "--data", s(&empty), "--out", s(&csv)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn write_reference_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut preds = String::from("patient_id,slice_id,p_covid,predicted_label\n");
    let mut labels = String::from("patient_id,label\n");
    let groups = [(142, "COVID", "COVID"), (110, "COVID", "NonCOVID"), (83, "NonCOVID", "COVID"), (358, "NonCOVID", "NonCOVID")];
    for (g, (count, predicted, truth)) in groups.iter().enumerate() {
        for i in 0..*count {
            let id = format!("g{g}_{i}");
            let (p, other) = if *predicted == "COVID" { ("0.8", "0.2") } else { ("0.2", "0.8") };
            let other_label = if *predicted == "COVID" { "NonCOVID" } else { "COVID" };
            // two agreeing slices and one dissenting slice per patient
            preds.push_str(&format!("{id},1.png,{p},{predicted}\n{id},2.png,{p},{predicted}\n{id},3.png,{other},{other_label}\n"));
            labels.push_str(&format!("{id},{truth}\n"));
        }
    }
    let p = dir.join("reference_predictions.csv");
    let l = dir.join("reference_labels.csv");
    std::fs::write(&p, preds).unwrap();
    std::fs::write(&l, labels).unwrap();
    (p, l)
}

fn metrics_without_policy(path: &Path) -> Value {
    let mut v: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("policy");
    v
}

#[test]
fn evaluate_reconstructed_confusion_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, labels) = write_reference_fixture(dir.path());
    let maj = dir.path().join("maj");
    let out = ctvit(&["evaluate", "--predictions", s(&preds), "--labels", s(&labels), "--out", s(&maj)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = metrics_without_policy(&maj.join("metrics.json"));
    assert_eq!(report["confusion"], serde_json::json!({"tp": 142, "fp": 110, "fn": 83, "tn": 358}));
    assert!((report["f1_covid"].as_f64().unwrap() - 0.60).abs() <= 0.005);
    assert!((report["f1_noncovid"].as_f64().unwrap() - 0.79).abs() <= 0.005);
    assert!((report["macro_f1_classwise"].as_f64().unwrap() - 0.69).abs() <= 0.005);
    assert_eq!(report["n"], 693);
    let csv = std::fs::read_to_string(maj.join("confusion.csv")).unwrap();
    assert_eq!(csv, "predicted,actual_COVID,actual_NonCOVID\nCOVID,142,110\nNonCOVID,83,358\n");

    let half = dir.path().join("half");
    let out = ctvit(&[
        "evaluate", "--predictions", s(&preds), "--labels", s(&labels), "--policy", "fraction:0.5", "--out", s(&half),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(metrics_without_policy(&half.join("metrics.json")), report);

    let slices = dir.path().join("slices");
    let out = ctvit(&[
        "evaluate", "--predictions", s(&preds), "--labels", s(&labels), "--ci-n", "slices", "--out", s(&slices),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(metrics_without_policy(&slices.join("metrics.json"))["n"], 693 * 3);
}

#[test]
fn evaluate_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, labels) = write_reference_fixture(dir.path());
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out_dir = dir.path().join("out");
    let out = ctvit(&["evaluate", "--predictions", s(&empty), "--labels", s(&labels), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 3);
    assert!(!out_dir.join("metrics.json").exists());
    std::fs::write(&empty, "patient_id,slice_id,p_covid,predicted_label\n").unwrap();
    assert_eq!(code(&ctvit(&["evaluate", "--predictions", s(&empty), "--labels", s(&labels)])), 3);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "patient_id,slice_id,p_covid,predicted_label\ng0_0,1.png,0.9,COVID\ng0_0,2.png,high,COVID\n").unwrap();
    let out = ctvit(&["evaluate", "--predictions", s(&bad), "--labels", s(&labels), "--out", s(&out_dir)]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let out = ctvit(&["evaluate", "--predictions", s(&bad), "--labels", s(&labels), "--policy", "fraction:1.5"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn sweep_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, labels) = write_reference_fixture(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = ctvit(&[
        "sweep", "--predictions", s(&preds), "--labels", s(&labels), "--grid", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
        "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("threshold,accuracy,macro_f1_eq2,macro_f1_classwise,weighted_f1,tp,fp,fn,tn"));
    let positives: Vec<u64> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[5].parse::<u64>().unwrap() + f[6].parse::<u64>().unwrap()
        })
        .collect();
    assert_eq!(positives.len(), 9);
    assert!(positives.windows(2).all(|w| w[1] <= w[0]));

    let summary: Value = serde_json::from_slice(&std::fs::read(out_dir.join("best_threshold.json")).unwrap()).unwrap();
    assert_eq!(summary["rule"], "fraction");
    for key in ["best_accuracy", "best_weighted_f1"] {
        assert!(summary[key]["threshold"].is_f64(), "{summary}");
        assert!(summary[key]["value"].is_f64(), "{summary}");
    }
    assert!(summary["excluded_patients"].is_array());
    assert_eq!(summary["patients"], 693);

    let all_covid = dir.path().join("all.csv");
    let mut text = String::from("patient_id,slice_id,p_covid,predicted_label\n");
    for p in 0..6 {
        for sl in 0..4 {
            text.push_str(&format!("g{}_{p},{sl}.png,0.9,COVID\n", p % 4));
        }
    }
    std::fs::write(&all_covid, text).unwrap();
    let out_dir = dir.path().join("sweep_all");
    let out = ctvit(&["sweep", "--predictions", s(&all_covid), "--labels", s(&labels), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let bodies: Vec<String> = table.lines().skip(1).map(|l| l.split_once(',').unwrap().1.to_string()).collect();
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&ctvit(&["--no-such-flag"])), 2);
    assert_eq!(code(&ctvit(&["predict", "--weights", "w", "--data", "d", "--bogus"])), 2);
    for (sub, flags) in [
        ("synth", &["--out", "--train", "--validation", "--test", "--slices", "--size", "--seed", "--force"][..]),
        ("scan", &["--data", "--manifest"][..]),
        ("train", &["--data", "--out", "--model", "--init", "--epochs", "--lr", "--batch-size", "--seed", "--freeze-backbone", "--max-steps", "--threads"][..]),
        ("predict", &["--weights", "--data", "--partition", "--out", "--threads"][..]),
        ("evaluate", &["--predictions", "--labels", "--policy", "--tie-break", "--z", "--ci-n", "--out"][..]),
        ("sweep", &["--predictions", "--labels", "--grid", "--rule", "--tie-break", "--out"][..]),
    ] {
        let out = ctvit(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "train.epochs = 3\ntrain.learnign_rate = 0.1\n").unwrap();
    let out = ctvit(&["--config", s(&cfg), "scan", "--data", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learnign_rate"));

    std::fs::write(&cfg, "train.epochs = 0\n").unwrap();
    let out = ctvit(&["--config", s(&cfg), "train", "--data", s(dir.path())]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn synth_scan_and_output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let args = ["synth", "--out", s(&data), "--train", "1", "1", "--validation", "0", "0", "--test", "1", "0", "--slices", "3", "--size", "16"];
    assert_eq!(code(&ctvit(&args)), 0);
    assert_eq!(code(&ctvit(&args)), 2, "non-empty root without --force");
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&ctvit(&forced)), 0);

    let manifest = dir.path().join("manifest.csv");
    let out = ctvit(&["scan", "--data", s(&data), "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("train,1,1,0,6,0"), "{stdout}");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("patient_id,partition,label,num_slices\n"));
    assert_eq!(text.lines().count(), 4);

    let (preds, labels) = write_reference_fixture(dir.path());
    let env_out = dir.path().join("from_env");
    let out = ctvit_env(
        &["evaluate", "--predictions", s(&preds), "--labels", s(&labels)],
        &[("CTVIT_OUT_DIR", &env_out)],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(env_out.join("metrics.json").is_file());
}
