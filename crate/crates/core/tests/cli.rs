use std::fs;
use std::path::Path;
use std::process::Command;

use otmatch::cli::{self, load_data_dir};

fn otmatch(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_otmatch")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) {
    let code = cli::run([
        "otmatch", "gen-data", "--out", s(dir), "--n", "96", "--n-test", "40", "--latent", "4", "--dx", "10", "--dy", "12",
    ]);
    assert_eq!(code, 0);
}

const SMALL: &[&str] = &["--epochs", "2", "--batch-size", "32", "--embedding-dim", "6", "--set", "hidden=8"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["otmatch", "train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    cli::run(args)
}

#[test]
fn gen_data_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_data(&a);
    small_data(&b);
    for f in ["manifest.txt", "train.x.emb", "train.y.emb", "test.x.emb", "test.y.emb", "maps.x.emb"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (train, test) = load_data_dir(&a).unwrap();
    assert_eq!((train.len(), train.x_dim(), train.y_dim()), (96, 10, 12));
    assert_eq!(test.unwrap().len(), 40);
}

#[test]
fn invalid_arguments_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = otmatch(&["gen-data", "--out", s(&dir.path().join("x")), "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    small_data(dir.path());
    let run = dir.path().join("run");
    for bad in [["--epsilon", "0"], ["--mass", "1.5"], ["--noise-ratio", "1"]] {
        let mut args = vec!["train", "--data", s(dir.path()), "--out", s(&run)];
        args.extend_from_slice(&bad);
        assert_eq!(otmatch(&args).status.code(), Some(2), "{bad:?}");
    }
    assert_eq!(otmatch(&["train", "--loss", "hinge"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = otmatch(&["eval", "--checkpoint", s(&dir.path().join("none.mltm")), "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.mltm"));
}

#[test]
fn train_eval_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let run = dir.path().join("run");
    assert_eq!(train(&data, &run, &["--noise-ratio", "0.25"]), 0);
    for f in ["checkpoint.mltm", "metrics.jsonl", "report.json", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let report = run.join("eval.json");
    let csv = dir.path().join("evals.csv");
    let ckpt = run.join("checkpoint.mltm");
    let args = ["otmatch", "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&report), "--csv", s(&csv)];
    assert_eq!(cli::run(args), 0);
    assert_eq!(cli::run(args), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for dir in ["text_to_audio", "audio_to_text"] {
        let r = |k: &str| json[dir][k].as_f64().unwrap();
        assert!(r("r1") <= r("r5") && r("r5") <= r("r10"), "{json}");
    }
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.starts_with("value,r1_t2a,r1_a2t,avg_r1,modality_gap,status\n"));

    // The echoed config alone reproduces the run.
    let again = dir.path().join("again");
    let code = cli::run(["otmatch", "train", "--config", s(&run.join("config.txt")), "--out", s(&again)]);
    assert_eq!(code, 0);
    for f in ["checkpoint.mltm", "metrics.jsonl", "report.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn partial_loss_at_full_mass_matches_full_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let (full, pot) = (dir.path().join("full"), dir.path().join("pot"));
    assert_eq!(train(&data, &full, &["--loss", "mltm"]), 0);
    assert_eq!(train(&data, &pot, &["--loss", "mltm-pot", "--mass", "1"]), 0);
    let loss = |run: &Path| -> Vec<f64> {
        fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["train_loss"].as_f64().unwrap())
            .collect()
    };
    for (a, b) in loss(&full).iter().zip(loss(&pot)) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let out = dir.path().join("sweep");
    let mut args = vec!["otmatch", "sweep", "--axis", "epsilon", "--values", "0.1,0.3", "--jobs", "2"];
    args.extend_from_slice(&["--data", s(&data), "--out", s(&out)]);
    args.extend_from_slice(SMALL);
    assert_eq!(cli::run(args), 0);
    let mut reader = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((&rows[0][0], &rows[1][0]), ("0.1", "0.3"));
    assert!(rows.iter().all(|r| &r[5] == "ok"), "{rows:?}");
    assert!(out.join("epsilon-0.3").join("checkpoint.mltm").exists());

    let mass = otmatch(&["sweep", "--axis", "mass", "--values", "0.5", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(mass.status.code(), Some(2));
}

#[test]
fn gradcheck_command_reports_every_case() {
    let out = otmatch(&["gradcheck", "--metrics", "euclidean", "--coords", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("18/18 configurations"), "{text}");
}
