use std::path::Path;
use std::process::{Command, Output};

fn topodepth(dir: &Path, args: &[&str]) -> Output {
    let data = format!("data_dir={}", dir.join("data").display());
    let run = format!("run_dir={}", dir.join("run").display());
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_topodepth"));
    cmd.args(["--quiet", "--set", &data, "--set", &run]);
    for o in [
        "data.width=8",
        "data.height=8",
        "data.frame_spacing=0.5",
        "data.num_laps=2",
        "cvae.latent_dim=4",
        "cvae.channels=[2,3,4]",
        "cvae.batch_size=4",
        "cvae.steps=6",
        "cvae.checkpoint_every=2",
        "classifier.channels=[2,3,4]",
        "classifier.steps=4",
    ] {
        cmd.args(["--set", o]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_error_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_topodepth")).arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
    let out = Command::new(env!("CARGO_BIN_EXE_topodepth")).args(["sample", "--count", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_checkpoint_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = topodepth(dir.path(), &["eval"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    let expected = dir.path().join("run").join("cvae.ckpt");
    assert!(stderr(&out).contains(&expected.display().to_string()), "{}", stderr(&out));
}

#[test]
fn invalid_config_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = topodepth(dir.path(), &["--set", "cvae.latent_dim=0", "gen-data"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("latent_dim"), "{}", stderr(&out));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[cvae]\nlatent = 3\n").unwrap();
    let out = topodepth(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("latent"), "{}", stderr(&out));
}

#[test]
fn quickstart_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for step in [&["gen-data"][..], &["split"], &["train-cvae", "--stop-after", "3"], &["train-cvae"], &["train-classifier"]] {
        let out = topodepth(d, step);
        assert!(out.status.success(), "{step:?}: {}", stderr(&out));
    }
    let log = std::fs::read_to_string(d.join("run/cvae_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let out = topodepth(d, &["eval", "--oracle-node"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("delta1=") && text.contains("oracle_node.rmse="), "{text}");
    assert!(text.contains("| test |"));
    assert!(d.join("run/eval_test.json").is_file());
    assert!(d.join("run/eval_test.txt").is_file());

    let again = topodepth(d, &["eval", "--oracle-node"]);
    assert_eq!(stdout(&again), text);

    let out = topodepth(d, &["sample", "--node", "3", "--count", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let samples: Vec<_> = std::fs::read_dir(d.join("run/samples")).unwrap().collect();
    assert_eq!(samples.len(), 8);
    assert_eq!(stdout(&out).lines().count(), 4);

    let out = topodepth(d, &["sample", "--node", "99", "--count", "1"]);
    assert!(!out.status.success());
}

#[test]
fn fill_holes_writes_dense_map() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = topodepth(d, &["--set", "data.hole_rate=0.3", "gen-data"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let input = d.join("data/frames/000000.depth");
    let output = d.join("filled.depth");
    let out = topodepth(d, &[
            "fill-holes",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--tol",
            "1e-8",
            "--max-iters",
            "500",
        ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let filled = topodepth::worldgen::io::read_depth(&output).unwrap();
    assert_eq!(filled.hole_count(), 0);
}
