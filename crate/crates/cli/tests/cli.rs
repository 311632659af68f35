use std::path::Path;
use std::process::{Command, Output};

fn glioseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glioseg")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = glioseg(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn stats_prints_rounded_result() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "dice\n0.78\n0.86\n0.83\n0.90\n0.95\n").unwrap();
    std::fs::write(dir.path().join("b.csv"), "dice\n0.78\n0.79\n0.84\n0.90\n0.93\n").unwrap();
    let s = ok(&["stats", "a.csv", "b.csv"], dir.path());
    assert!(s.starts_with("t=1.11, p=0.33, df=4"), "{s}");
    let json = ok(&["stats", "a.csv", "b.csv", "--column", "dice", "--json"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!((v["t_stat"].as_f64().unwrap() - 1.12).abs() <= 0.01);
    assert!((v["p_value"].as_f64().unwrap() - 0.33).abs() <= 0.01);
    assert_eq!(v["df"], 4);
    assert_eq!(v["significant"], false);
}

#[test]
fn stats_rejects_unknown_column() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "x,y\n1,2\n").unwrap();
    let out = glioseg(&["stats", "a.csv", "a.csv", "--column", "z"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no column"));
}

#[test]
fn phantom_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            &["phantom-gen", "--out", out, "--count", "2", "--seed", "5", "--dims", "16,16,16", "--degrade"],
            dir.path(),
        );
    }
    let names: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.len() > 2);
    for n in names {
        assert_eq!(read(dir.path().join("a").join(&n)), read(dir.path().join("b").join(&n)), "{n:?}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(glioseg(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(
        glioseg(&["predict", "--checkpoint", "x", "--data", "y", "--out", "z"], dir.path()).status.code(),
        Some(3)
    );
    std::fs::write(dir.path().join("bad.munt"), b"MUNTgarbage").unwrap();
    let out = glioseg(&["predict", "--checkpoint", "bad.munt", "--data", "y", "--out", "z"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(glioseg(&["preprocess", "--data", "y", "--out", "z", "--jobs", "0"], dir.path()).status.code(), Some(3));
}

#[test]
fn full_chain_runs_and_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom-gen", "--out", "gli", "--count", "10", "--seed", "1", "--dims", "24,24,24"], d);
    ok(&["phantom-gen", "--out", "ssa", "--count", "3", "--seed", "2", "--dims", "24,24,24", "--degrade"], d);
    ok(&["phantom-gen", "--out", "ssa-val", "--count", "2", "--seed", "3", "--dims", "24,24,24", "--degrade"], d);
    ok(&["preprocess", "--data", "gli", "--out", "gli-p", "--jobs", "2"], d);
    ok(&["preprocess", "--data", "ssa", "--out", "ssa-p"], d);
    ok(&["preprocess", "--data", "ssa-val", "--out", "ssa-val-p"], d);
    ok(&["augment", "--content", "ssa-p", "--style", "gli-p", "--out", "nst", "--seed", "4", "--iterations", "3"], d);
    assert!(d.join("nst/nst_slices.csv").exists());

    let train = ["train", "--data", "gli-p", "--seed", "0", "--epochs", "2", "--batches", "4", "--fold", "1"];
    ok(&[&train[..], &["--out", "run-a"]].concat(), d);
    ok(&[&train[..], &["--out", "run-b"]].concat(), d);
    assert_eq!(read(d.join("run-a/epochs.csv")), read(d.join("run-b/epochs.csv")));
    assert_eq!(read(d.join("run-a/latest.munt")), read(d.join("run-b/latest.munt")));

    ok(
        &[
            "finetune",
            "--checkpoint",
            "run-a/best.munt",
            "--data",
            "ssa-p",
            "--stylized",
            "nst",
            "--val",
            "ssa-val-p",
            "--out",
            "ft",
            "--seed",
            "1",
            "--epochs",
            "1",
            "--batches",
            "4",
        ],
        d,
    );
    let csv = String::from_utf8(read(d.join("ft/epochs.csv"))).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with("FINETUNE"), "{csv}");

    ok(&["predict", "--checkpoint", "ft/latest.munt", "--data", "ssa-val-p", "--out", "pred", "--jobs", "2"], d);
    ok(&["evaluate", "--pred", "pred", "--data", "ssa-val-p", "--out", "eval"], d);
    let dice = String::from_utf8(read(d.join("eval/dice.csv"))).unwrap();
    assert_eq!(dice.lines().next(), Some("id,ET,TC,WT"));
    assert_eq!(dice.lines().count(), 3);
    ok(&["report", "--inputs", "eval/lesion.csv", "--out", "table/lesions.csv"], d);
    let table = String::from_utf8(read(d.join("table/lesions.csv"))).unwrap();
    assert!(table.lines().last().unwrap().starts_with("mean,"), "{table}");
}

#[test]
fn crossval_writes_fold_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom-gen", "--out", "gli", "--count", "10", "--seed", "1", "--dims", "24,24,24"], d);
    ok(
        &[
            "crossval",
            "--data",
            "gli",
            "--out",
            "cv",
            "--dataset",
            "GLI",
            "--folds",
            "0,2",
            "--seed",
            "0",
            "--epochs",
            "1",
            "--batches",
            "2",
        ],
        d,
    );
    for f in
        ["fold0_epochs.csv", "fold2_epochs.csv", "crossval_epochs.csv", "folds.json", "summary.json", "experiment.json"]
    {
        assert!(d.join("cv").join(f).exists(), "{f}");
    }
    let mean = String::from_utf8(read(d.join("cv/crossval_epochs.csv"))).unwrap();
    assert!(mean.lines().nth(1).unwrap().ends_with(",2"), "{mean}");
}
