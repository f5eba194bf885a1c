use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_s4former"))
}

fn config(dir: &Path, model: &str, train: &str) -> std::path::PathBuf {
    let text = format!(
        r#"[model]
{model}

[task]
kind = "delayed_echo"
seq_len = 12
delay = 2
vocab = 4
train_size = 16
eval_size = 4
seed = 1

[train]
eval_interval = 2
{train}

[io]
checkpoint = "{ckpt}"
log = "{log}"
"#,
        ckpt = dir.join("run.s4fm").display(),
        log = dir.join("run.log").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const DIR_MODEL: &str = "approach = \"dir\"\nh = 8\nblocks = 1";

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn zero_steps_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 0");
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("run.s4fm")).unwrap();
    assert_eq!(&bytes[..4], b"S4FM");
    assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
}

#[test]
fn rep_without_left_context_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "approach = \"rep\"\nh = 8", "steps = 1");
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("model.rep_left_context"),
        "{}",
        stderr(&o)
    );
    assert!(!dir.path().join("run.s4fm").exists());
}

#[test]
fn unreadable_config_and_bad_flags_exit_2() {
    assert_eq!(
        run(&["train", "--config", "/nonexistent.toml"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), DIR_MODEL, "steps = 4\nlr = 0.01");
        let o = run(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push((
            std::fs::read(dir.path().join("run.s4fm")).unwrap(),
            std::fs::read(dir.path().join("run.log")).unwrap(),
            stdout(&o),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let log = String::from_utf8(outputs[0].1.clone()).unwrap();
    assert_eq!(log, outputs[0].2);
    assert!(log.starts_with("step=0 split=eval loss="));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 0");
    let a = dir.path().join("a.s4fm");
    let b = dir.path().join("b.s4fm");
    let c = cfg.to_str().unwrap();
    assert!(
        run(&["train", "--config", c, "--checkpoint", a.to_str().unwrap()])
            .status
            .success()
    );
    assert!(run(&[
        "train",
        "--config",
        c,
        "--seed",
        "9",
        "--checkpoint",
        b.to_str().unwrap()
    ])
    .status
    .success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn eval_and_check_load_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 2");
    let c = cfg.to_str().unwrap();
    assert!(run(&["train", "--config", c]).status.success());
    let ck = dir.path().join("run.s4fm");
    let k = ck.to_str().unwrap();
    let o = run(&["eval", "--config", c, "--checkpoint", k]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("split=eval sequences=4 loss="));
    for suite in ["duality", "causality", "streaming", "grads", "params"] {
        let o = run(&["check", "--config", c, "--checkpoint", k, "--suite", suite]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{suite}: {}{}",
            stdout(&o),
            stderr(&o)
        );
        assert!(stdout(&o)
            .lines()
            .all(|l| l.starts_with("PASS") || l.starts_with("suite")));
    }
}

#[test]
fn unknown_suite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 0");
    let o = run(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--suite",
        "speed",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn digest_mismatch_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 0");
    assert!(run(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let ck = dir.path().join("run.s4fm");
    let other = config(
        dir.path(),
        "approach = \"dir\"\nh = 6\nblocks = 1",
        "steps = 0",
    );
    let o = run(&[
        "eval",
        "--config",
        other.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("digest"), "{}", stderr(&o));
}

#[test]
fn params_suite_at_paper_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "approach = \"dir\"\nscheme = \"real\"\nh = 512\nblocks = 1",
        "steps = 0",
    );
    let o = run(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--suite",
        "params",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("core count 4100"), "{}", stdout(&o));
    assert!(stdout(&o).contains("window 3500–4600 met"));
}

#[test]
fn offline_causality_check_fails_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let model =
        "approach = \"baseline\"\nh = 8\nkernel_size = 4\nblocks = 1\ncontext = \"offline\"";
    let cfg = config(dir.path(), model, "steps = 0");
    let o = run(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--suite",
        "causality",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stdout(&o).contains("FAIL perturb input at t=24: output first diverges at t=23"),
        "{}",
        stdout(&o)
    );
}

fn stream(cfg: &Path, chunk: &str, input: &str) -> Output {
    let mut child = bin()
        .args([
            "stream",
            "--config",
            cfg.to_str().unwrap(),
            "--chunk-size",
            chunk,
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // the child may exit before reading everything
    let _ = child.stdin.take().unwrap().write_all(input.as_bytes());
    child.wait_with_output().unwrap()
}

#[test]
fn stream_output_does_not_depend_on_chunk_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 0");
    let input: String = (0..7)
        .map(|t| format!("{} 0 {} 0.5\n", t as f64 * 0.1, 1.0 - t as f64 * 0.2))
        .collect();
    let one = stream(&cfg, "1", &input);
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    let text = stdout(&one);
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.split_whitespace().count() == 4));
    let three = stream(&cfg, "3", &input);
    let a: Vec<f64> = text
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    let b: Vec<f64> = stdout(&three)
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9 * scale));
}

#[test]
fn stream_rejects_bad_rows_and_offline_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 0");
    assert_eq!(stream(&cfg, "2", "1 2 3\n").status.code(), Some(2));
    assert_eq!(stream(&cfg, "0", "").status.code(), Some(2));
    let offline = config(
        dir.path(),
        "approach = \"baseline\"\nh = 8\nblocks = 1\ncontext = \"offline\"",
        "steps = 0",
    );
    let o = stream(&offline, "1", "1 0 0 0\n");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_emits_the_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "approach = \"dir\"\nh = 2\nblocks = 1",
        "steps = 0",
    );
    let o = run(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,T,median_ns,reps");
    assert_eq!(lines.len(), 1 + 4 * 3);
    for mode in [
        "sequential_step",
        "parallel_scan",
        "direct_conv",
        "fft_conv",
    ] {
        for t in [256, 1024, 4096] {
            let prefix = format!("{mode},{t},");
            let row = lines.iter().find(|l| l.starts_with(&prefix)).unwrap();
            let fields: Vec<&str> = row.split(',').collect();
            assert!(fields[2].parse::<u128>().unwrap() > 0);
            assert!(fields[3].parse::<usize>().unwrap() >= 5);
        }
    }
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), DIR_MODEL, "steps = 5\nlr = 1e300\nclip = 0.0");
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}
