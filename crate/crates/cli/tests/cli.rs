use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multiquant::topology::{ArchSpec, ConvSpec, Strategy};
use multiquant::trainer::Method;
use multiquant_cli::config::{ArchChoice, DatasetSpec, RunConfig};
use multiquant_cli::experiment::{ablate, audit, run_experiment, ABLATION_FILE, ACCURACY_FILE, CHECKPOINT_FILE};
use multiquant_cli::report::{compare, load_run};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multiquant"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn vector_arch() -> ArchSpec {
    ArchSpec {
        in_channels: 5,
        height: 1,
        width: 1,
        classes: 3,
        stem: ConvSpec::new(6, 1, 0, false),
        body: vec![ConvSpec::new(6, 1, 0, false), ConvSpec::new(4, 1, 0, false)],
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

fn synthetic(out: &Path) -> RunConfig {
    RunConfig {
        arch: ArchChoice::Spec(vector_arch()),
        dataset: DatasetSpec::Synthetic {
            classes: 3,
            dim: 5,
            train_n: 96,
            test_n: 48,
        },
        epochs: 3,
        batch_size: 16,
        lr: 0.1,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn train_writes_artifacts_and_report_reads_them() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("r");
    let cfg = write_config(d.path(), &synthetic(&out));
    let o = run(&["train", "--config", &cfg], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.json",
        "history.csv",
        "accuracy.csv",
        "cost.csv",
        "storage.json",
        "usage.csv",
        "model.ckpt",
        "summary.txt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let acc = fs::read_to_string(out.join(ACCURACY_FILE)).unwrap();
    assert!(acc.contains("Avg.") && acc.contains("Size (MB)"));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(
        history.lines().next().unwrap(),
        "epoch,step,bit,loss_ce,loss_kd,eval_acc"
    );
    assert_eq!(history.lines().count(), 1 + 3 * 3);

    let o = run(&["report", out.to_str().unwrap()], d.path());
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("Avg."));

    let o = run(&["eval", "--run", out.to_str().unwrap()], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evals: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect();
    let stored = load_run(&out).unwrap();
    for ((b, a), line) in stored.accuracy.iter().zip(&evals) {
        assert_eq!(line, &format!("{b} {a:.4}"));
    }
}

#[test]
fn missing_dataset_fails_before_creating_output() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data-dir", "no/such/dir", "--out", "never"], d.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    assert!(!d.path().join("never").exists());
}

#[test]
fn every_config_problem_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "train",
            "--bits",
            "2,4",
            "--strategy",
            "explicit",
            "--data-dir",
            "nowhere",
            "--out",
            "x",
        ],
        d.path(),
    );
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(!o.status.success());
    assert!(err.contains("explicit-map") && err.contains("does not exist"), "{err}");
    let o = run(&["train", "--bits", "1,4"], d.path());
    assert!(!o.status.success());
}

#[test]
fn unknown_config_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.json"), r#"{"epochs": 2, "learning-rate": 0.1}"#).unwrap();
    let o = run(&["train", "--config", "c.json"], d.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning-rate"));
}

#[test]
fn audit_prints_cost_and_storage() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["audit", "--bits", "2,4,6,8", "--strategy", "serial"], d.path());
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("{2:{1}, 4:{1,2}, 6:{1,2,3}, 8:{1,2,3,4}}"), "{s}");
    assert!(s.contains("body compression 16.00x"));
    assert!(s.lines().filter(|l| l.ends_with("true")).count() == 4);

    let o = run(&["audit", "--explicit-map", "2:4;4:1,3;8:1,2,3,4"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selection (explicit)"));
}

#[test]
fn audit_of_baselines_reports_their_storage() {
    let d = tempfile::tempdir().unwrap();
    let base = RunConfig {
        out: d.path().join("a"),
        ..RunConfig::default()
    };
    let any = audit(
        &RunConfig {
            method: Method::AnyPrecision,
            bits: vec![4, 8],
            ..base.clone()
        },
        false,
    )
    .unwrap();
    assert!(any.contains("body compression 1.00x"), "{any}");
    let ada = audit(
        &RunConfig {
            method: Method::AdaBit,
            bits: vec![4, 8],
            ..base
        },
        true,
    )
    .unwrap();
    assert!(ada.contains("body compression 4.00x"), "{ada}");
    assert!(d.path().join("a/audit.txt").exists());
}

#[test]
fn msqe_prints_and_writes_rows() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "msqe",
            "--bits",
            "4,8",
            "--u",
            "2",
            "--samples",
            "20000",
            "--out",
            "m.csv",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let o = run(&["msqe", "--bits", "1"], d.path());
    assert!(!o.status.success());
}

#[test]
fn report_of_missing_run_names_the_file() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["report", "nothing"], d.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config.json"));
}

#[test]
fn runs_are_reproducible_and_comparable() {
    let d = tempfile::tempdir().unwrap();
    let a = run_experiment(&synthetic(&d.path().join("a"))).unwrap();
    let b = run_experiment(&synthetic(&d.path().join("b"))).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.train.history, b.train.history);
    assert_eq!(
        fs::read(d.path().join("a").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(d.path().join("b").join(CHECKPOINT_FILE)).unwrap()
    );
    let deltas = compare(
        &load_run(&d.path().join("a")).unwrap(),
        &load_run(&d.path().join("b")).unwrap(),
    );
    assert!(deltas.iter().all(|d| d.3 == 0.0));
}

#[test]
fn ablation_covers_the_four_configurations() {
    let d = tempfile::tempdir().unwrap();
    let base = RunConfig {
        epochs: 2,
        ..synthetic(&d.path().join("abl"))
    };
    let s = ablate(&base, &[0, 1], 2).unwrap();
    assert_eq!(s.rows.len(), 4 * 2 * 3);
    assert_eq!(s.lowest_bit_mean.len(), 4);
    for strategy in [Strategy::Serial, Strategy::Amortized] {
        for distill in [true, false] {
            assert_eq!(
                s.rows
                    .iter()
                    .filter(|r| r.strategy == strategy && r.distill == distill)
                    .count(),
                6
            );
        }
    }
    assert!(s.selection_delta().is_some() && s.distill_delta().is_some());
    assert!(d.path().join("abl").join(ABLATION_FILE).exists());
    assert!(ablate(&base, &[], 1).is_err());
}
