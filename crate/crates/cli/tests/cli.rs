use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 2

[data]
path = "panel.csv"
targets_path = "targets.csv"
warmup = 40
synth.n_assets = 6
synth.n_days = 200
synth.planted = "close 5 Delta SEP"
synth.noise_std = 0.5

[policy]
embed_dim = 8
hidden = 16
head_hidden = 12

[ppo]
batch_steps = 128
minibatch_steps = 64
epochs = 1

[pool]
capacity = 3
steps = 50

[train]
total_steps = 256
eval_interval = 128
"#;

fn run(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_alphaforge"));
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("ALPHAFORGE_THREADS", t),
        None => cmd.env_remove("ALPHAFORGE_THREADS"),
    };
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn synth_train_eval_export() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    // the panel files the config points at do not exist yet
    assert_eq!(
        code(&run(
            dir,
            &["train", "--config", "run.toml", "--out", "out"],
            None
        )),
        3
    );

    let o = run(dir, &["synth", "--config", "run.toml", "--out", "."], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("panel.csv").exists() && dir.join("targets.csv").exists());
    let header = fs::read_to_string(dir.join("panel.csv")).unwrap();
    assert!(header.starts_with("date,symbol,open,high,low,close,volume,vwap\n"));

    let o = run(
        dir,
        &["train", "--config", "run.toml", "--out", "out"],
        Some("2"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("seed 2 steps "));
    for f in ["metrics.csv", "checkpoint.bin", "pool.csv", "config.toml"] {
        assert!(dir.join("out").join(f).exists(), "{f}");
    }
    // one thread gives the same bytes
    let o = run(
        dir,
        &["train", "--config", "run.toml", "--out", "single"],
        Some("1"),
    );
    assert_eq!(code(&o), 0);
    for f in ["metrics.csv", "checkpoint.bin", "pool.csv"] {
        assert_eq!(
            fs::read(dir.join("out").join(f)).unwrap(),
            fs::read(dir.join("single").join(f)).unwrap(),
            "{f}"
        );
    }

    let o = run(dir, &["eval", "--checkpoint", "out"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("test IC "));
    let report = fs::read_to_string(dir.join("out").join("eval.json")).unwrap();
    assert!(report.contains("\"test_days\""));

    let o = run(
        dir,
        &["export-pool", "--checkpoint", "out/checkpoint.bin"],
        None,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        o.stdout,
        fs::read(dir.join("out").join("pool.csv")).unwrap()
    );

    // resuming a finished run changes nothing
    let before = fs::read(dir.join("out").join("metrics.csv")).unwrap();
    let o = run(dir, &["train", "--checkpoint", "out/checkpoint.bin"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.join("out").join("metrics.csv")).unwrap(),
        before
    );
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.toml"), "seed = 1\nbogus = 3\n").unwrap();
    let o = run(dir, &["train", "--config", "bad.toml"], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert!(!dir.join("out").exists());

    fs::write(dir.join("tlrs.toml"), "[shaping]\nkind = \"tlrs\"\n").unwrap();
    assert_eq!(
        code(&run(dir, &["train", "--config", "tlrs.toml"], None)),
        2
    );
    assert_eq!(code(&run(dir, &["train"], None)), 2);
    assert_eq!(code(&run(dir, &["frobnicate"], None)), 2);
    assert_eq!(code(&run(dir, &["synth", "--out", "."], Some("zero"))), 2);
    fs::write(dir.join("one.toml"), "[data.synth]\nn_assets = 1\n").unwrap();
    assert_eq!(code(&run(dir, &["synth", "--config", "one.toml"], None)), 2);
}

#[test]
fn io_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(
        code(&run(dir, &["train", "--config", "missing.toml"], None)),
        3
    );
    assert_eq!(
        code(&run(dir, &["eval", "--checkpoint", "missing.bin"], None)),
        3
    );
    fs::write(dir.join("junk.bin"), b"AFORGECK\x09\x00\x00\x00").unwrap();
    let o = run(dir, &["export-pool", "--checkpoint", "junk.bin"], None);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}
