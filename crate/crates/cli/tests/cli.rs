use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glks::data::{read_jsonl, Limits, SynthManifest};
use glks::eval::{read_pgm, KSTrace};
use glks_cli::config::KEYS;

fn glks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glks"))
        .args(args)
        .env_remove("GLKS_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: u64, n: usize) -> PathBuf {
    let path = dir.join(name);
    let o = glks(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--n",
        &n.to_string(),
        "--out",
        s(&path),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    path
}

fn tiny_config(dir: &Path, train: &Path, valid: &Path) -> PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny run\ntrain_path = {}\nvalid_path = {}\nout_dir = {}\nhidden = 8\nemb_dim = 8\n\
             batch_size = 4\npretrain_epochs = 1\nepochs = 2\nmax_len = 10\n",
            s(train),
            s(valid),
            s(&dir.join("out"))
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn help_lists_every_flag_with_its_default() {
    for cmd in ["train", "sweep-m"] {
        let o = glks(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let help = stdout(&o);
        for (key, _) in KEYS {
            let flag = format!("--{}", key.replace('_', "-"));
            let line = help
                .lines()
                .position(|l| l.trim_start().starts_with(&flag))
                .unwrap_or_else(|| panic!("{flag} missing from {cmd} help"));
            let described = help
                .lines()
                .skip(line)
                .take(3)
                .any(|l| l.contains("[default:"));
            assert!(described, "{flag} has no default in {cmd} help");
        }
    }
    for cmd in ["synth", "eval", "generate", "trace"] {
        let help = stdout(&glks(&[cmd, "--help"]));
        for line in help.lines().filter(|l| l.trim_start().starts_with("--")) {
            let flag = line.split_whitespace().next().unwrap();
            if ["--help", "--echo", "--detailed"].contains(&flag) {
                continue;
            }
            let block: String = help.lines().skip_while(|l| *l != line).take(3).collect();
            assert!(
                block.contains("[default:") || block.contains('<'),
                "{cmd} {flag}"
            );
        }
    }
}

#[test]
fn synth_writes_corpus_and_gold_windows() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "s.jsonl", 7, 30);
    let episodes = read_jsonl(&path, Limits::default()).unwrap();
    assert_eq!(episodes.len(), 30);
    let manifest: SynthManifest = serde_json::from_str(
        &fs::read_to_string(dir.path().join("s.jsonl.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest.gold_windows.len(), 30);
    for (ep, &w) in episodes.iter().zip(&manifest.gold_windows) {
        assert_eq!(ep.gold_span, Some((4 * w, 4 * w + 4)));
    }
    // same seed, same bytes
    let again = synth(dir.path(), "t.jsonl", 7, 30);
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = glks(&["train", "--hidden", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train_path"), "{}", stderr(&o));

    let o = glks(&[
        "train",
        "--train-path",
        "/nonexistent/train.jsonl",
        "--valid-path",
        "/nonexistent/v.jsonl",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not exist"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "hidden = 8\nbatch_size = lots\n").unwrap();
    let o = glks(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    assert_eq!(
        glks(&["train", "--no-such-flag", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(glks(&[]).status.code(), Some(2));
}

#[test]
fn eval_echo_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let test = synth(dir.path(), "test.jsonl", 3, 12);
    let o = glks(&["eval", "--echo", "--test", s(&test)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).trim(),
        r#"{"rouge1": 100.00, "rouge2": 100.00, "rougeL": 100.00}"#
    );

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(
        glks(&["eval", "--echo", "--test", s(&empty)]).status.code(),
        Some(2)
    );

    // two of the responses match an extra reference but not the gold one
    let test_mr = dir.path().join("mr.jsonl");
    fs::write(
        &test_mr,
        concat!(
            r#"{"background": "a b c d", "context": ["x"], "response": "a b", "references": ["c d"]}"#,
            "\n",
            r#"{"background": "a b c d", "context": ["y"], "response": "b c", "references": ["d a"]}"#,
            "\n",
        ),
    )
    .unwrap();
    let preds = dir.path().join("preds.txt");
    fs::write(&preds, "c d\nb c\n").unwrap();
    let sr = stdout(&glks(&[
        "eval",
        "--predictions",
        s(&preds),
        "--test",
        s(&test_mr),
        "--mode",
        "sr",
    ]));
    let mr = stdout(&glks(&[
        "eval",
        "--predictions",
        s(&preds),
        "--test",
        s(&test_mr),
        "--mode",
        "mr",
    ]));
    assert_eq!(
        sr.trim(),
        r#"{"rouge1": 50.00, "rouge2": 50.00, "rougeL": 50.00}"#
    );
    assert_eq!(
        mr.trim(),
        r#"{"rouge1": 100.00, "rouge2": 100.00, "rougeL": 100.00}"#
    );

    fs::write(&preds, "c d\n").unwrap();
    assert_eq!(
        glks(&["eval", "--predictions", s(&preds), "--test", s(&test_mr)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        glks(&[
            "eval",
            "--echo",
            "--predictions",
            s(&preds),
            "--test",
            s(&test_mr)
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn train_generate_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.jsonl", 1, 16);
    let valid = synth(dir.path(), "valid.jsonl", 2, 6);
    let cfg = tiny_config(dir.path(), &train, &valid);
    let o = glks(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in ["best.ckpt", "last.ckpt", "train.log", "vocab.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    // header plus one pretraining and two joint epochs
    assert_eq!(log.lines().count(), 4);
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 1);

    let ckpt = out.join("best.ckpt");
    let o = glks(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&valid),
        "--max-len",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.split_whitespace().count() <= 10));

    let o = glks(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--test",
        s(&valid),
        "--max-len",
        "10",
        "--detailed",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["rougeL"]["f1"].as_f64().unwrap() >= 0.0);

    let trace_dir = dir.path().join("trace");
    let o = glks(&[
        "trace",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&valid),
        "--index",
        "2",
        "--out",
        s(&trace_dir),
        "--max-len",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut files: Vec<String> = fs::read_dir(&trace_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["episode_2.csv", "episode_2.pgm"]);
    let trace =
        KSTrace::read_csv(fs::File::open(trace_dir.join("episode_2.csv")).unwrap()).unwrap();
    let pgm = read_pgm(&fs::read_to_string(trace_dir.join("episode_2.pgm")).unwrap()).unwrap();
    assert_eq!(pgm.height, trace.steps());
    assert_eq!(pgm.width, trace.background.len());
    let header = fs::read_to_string(trace_dir.join("episode_2.csv")).unwrap();
    assert!(header.starts_with("step,position,token,alpha,gate,gold"));

    let o = glks(&[
        "trace",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&valid),
        "--index",
        "6",
        "--out",
        s(&trace_dir),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // a vocabulary that differs from the checkpoint's is refused
    let vocab = dir.path().join("other_vocab.txt");
    fs::write(&vocab, "zzz\n").unwrap();
    let o = glks(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--test",
        s(&valid),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
    let o = glks(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--vocab",
        s(&out.join("vocab.txt")),
        "--test",
        s(&valid),
        "--max-len",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // a corrupted checkpoint is a runtime failure
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, b"GLKSCKPT garbage").unwrap();
    let o = glks(&["generate", "--checkpoint", s(&broken), "--input", s(&valid)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn sweep_reports_one_row_per_m() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.jsonl", 1, 12);
    let valid = synth(dir.path(), "valid.jsonl", 2, 4);
    let cfg = tiny_config(dir.path(), &train, &valid);
    let o = glks(&[
        "sweep-m",
        "--config",
        s(&cfg),
        "--values",
        "1,3,5",
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "m\trouge1");
    let ms: Vec<usize> = rows[1..]
        .iter()
        .map(|r| r.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ms, [1, 3, 5]);

    let o = glks(&["sweep-m", "--config", s(&cfg), "--values", "3,2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_cap_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let test = synth(dir.path(), "t.jsonl", 3, 4);
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_glks"))
            .args(["eval", "--echo", "--test", s(&test)])
            .env("GLKS_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(run("0").status.code(), Some(2));
    let two = run("2");
    assert_eq!(two.status.code(), Some(0));
    assert_eq!(stdout(&two), stdout(&run("1")));
}
