use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drcf::dataio::{build_dataset, parse_movielens, split, Format};
use drcf::eval::{evaluate, predict_with_fallback, SlopeOne};
use drcf::persist;

fn drcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drcf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small ratings file with some structure, in `u.data` layout.
fn write_data(dir: &Path) -> PathBuf {
    let mut text = String::new();
    for u in 0..40 {
        for i in 0..30 {
            if (u * 7 + i * 3) % 4 == 0 {
                let r = 1 + (u % 3 + i % 3) % 5;
                text.push_str(&format!("{}\t{}\t{r}\t{}\n", u + 1, i + 100, u * 100 + i));
            }
        }
    }
    let path = dir.join("u.data");
    std::fs::write(&path, text).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train(dir: &Path, data: &Path) -> PathBuf {
    let model = dir.join("m.drcf");
    let out = drcf(&[
        "train", "--data", p(data), "--out", p(&model), "--d", "4", "--hidden", "6", "--lambda", "1e-5",
        "--batch-size", "100", "--epochs", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

fn rmse_line(o: &Output) -> f64 {
    stdout(o).trim().strip_prefix("test_rmse=").unwrap().parse().unwrap()
}

#[test]
fn train_then_eval_reports_same_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let model = dir.path().join("m.drcf");
    let trained = drcf(&[
        "train", "--data", p(&data), "--out", p(&model), "--d", "4", "--hidden", "6", "--lambda", "1e-5",
        "--batch-size", "100", "--epochs", "5", "--report", p(&dir.path().join("r.tsv")),
    ]);
    assert!(trained.status.success());
    let evaluated = drcf(&["eval", "--data", p(&data), "--model", p(&model)]);
    assert!(evaluated.status.success());
    assert_eq!(rmse_line(&trained), rmse_line(&evaluated));
    let report = std::fs::read_to_string(dir.path().join("r.tsv")).unwrap();
    assert!(report.starts_with("epoch\tobjective\ttrain_rmse\ttest_rmse\n"));
}

#[test]
fn predict_matches_library_and_falls_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let model_path = train(dir.path(), &data);
    let model = persist::load(&model_path).unwrap();

    let out = drcf(&["predict", "--model", p(&model_path), "--user", "1", "--item", "100"]);
    assert!(out.status.success());
    let expected = format!("{:.4}", predict_with_fallback(&model, "1", "100"));
    assert_eq!(stdout(&out).trim(), expected);

    let out = drcf(&["predict", "--model", p(&model_path), "--user", "nobody", "--item", "100"]);
    assert_eq!(stdout(&out).trim(), format!("{:.4}", model.global_mean));
}

#[test]
fn baseline_eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = drcf(&["eval", "--data", p(&data), "--baseline", "slopeone"]);
    assert!(out.status.success());
    let full = build_dataset(&parse_movielens(&data, Format::Ml100k).unwrap(), Some(5.0)).unwrap();
    let (tr, te) = split(&full, 0.9, 42).unwrap();
    assert_eq!(rmse_line(&out), evaluate(&SlopeOne::fit(&tr).unwrap(), &te).unwrap());
    for b in ["global-mean", "item-mean"] {
        assert!(drcf(&["eval", "--data", p(&data), "--baseline", b]).status.success());
    }
}

#[test]
fn eval_rejects_model_from_other_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let model = train(dir.path(), &data);
    let other = dir.path().join("other.data");
    std::fs::write(&other, "1\t100\t3\t0\n2\t101\t4\t0\n3\t102\t5\t0\n").unwrap();
    let out = drcf(&["eval", "--data", p(&other), "--model", p(&model)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn split_writes_both_parts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let prefix = dir.path().join("part");
    let out = drcf(&["split", "--data", p(&data), "--out", p(&prefix)]);
    assert!(out.status.success());
    let count = |suffix: &str| {
        std::fs::read_to_string(dir.path().join(format!("part.{suffix}"))).unwrap().lines().count()
    };
    let total = std::fs::read_to_string(&data).unwrap().lines().count();
    assert_eq!(count("train") + count("test"), total);
    assert_eq!(stdout(&out).trim(), format!("train={} test={}", count("train"), count("test")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.data");
    assert_eq!(drcf(&["eval", "--data", p(&missing), "--baseline", "slopeone"]).status.code(), Some(3));
    assert_eq!(drcf(&["train", "--data"]).status.code(), Some(1));
    assert_eq!(drcf(&["bogus"]).status.code(), Some(1));
    let bad = dir.path().join("bad.data");
    std::fs::write(&bad, "1\t2\n").unwrap();
    assert_eq!(drcf(&["eval", "--data", p(&bad), "--baseline", "slopeone"]).status.code(), Some(2));
    let data = write_data(dir.path());
    let out = drcf(&["train", "--data", p(&data), "--out", p(&dir.path().join("m")), "--d", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let run = |threads: &str| {
        let model = dir.path().join(format!("m{threads}.drcf"));
        let out = drcf(&[
            "--threads", threads, "train", "--data", p(&data), "--out", p(&model), "--d", "4", "--hidden", "6",
            "--batch-size", "100", "--epochs", "3",
        ]);
        assert!(out.status.success());
        std::fs::read(model).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}
