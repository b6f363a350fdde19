//! End-to-end tests of the `mvcount` binary: command wiring, exit codes,
//! and golden-file reproduction.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvcount(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcount"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(
        &path,
        r#"
[data]
scenes = 2
frames_per_scene = 6
test_frames_per_scene = 2
label_rate = 50.0
seed = 3

[data.grid]
h = 16
w = 16
meters_per_cell = 0.5
plane_height = 1.7

[data.crowd]
count_min = 3
count_max = 8

[data.rig]
image_width = 24
image_height = 24
focal = 30.0
ring_radius = 7.0

[model]
extractor_channels = [4, 4, 8]
base_channels = 8

[train]
epochs = 2
warmup_epochs = 1
label_rate = 50.0
probe_size = 2
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_and_golden_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());

    let out = mvcount(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", "data"],
        dir.path(),
    );
    assert!(out.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2 scenes x 6 frames x 3 views"), "summary: {stdout}");

    // rerun into a second directory: byte-identical dataset
    let out = mvcount(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", "data2"],
        dir.path(),
    );
    assert!(out.status.success());
    let a = fs::read(dir.path().join("data/manifest.toml")).unwrap();
    let b = fs::read(dir.path().join("data2/manifest.toml")).unwrap();
    assert_eq!(a, b);
    let a = fs::read(dir.path().join("data/frames/scene000_frame000.mvct")).unwrap();
    let b = fs::read(dir.path().join("data2/frames/scene000_frame000.mvct")).unwrap();
    assert_eq!(a, b);

    let out = mvcount(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--mode",
            "mvpr",
            "--schedule",
            "random",
            "--data",
            "data",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/checkpoint.mvct").exists());
    assert!(dir.path().join("run/train_log.csv").exists());
    let log = fs::read_to_string(dir.path().join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iter,epoch,branch,l_label,l_pre_rank,l_un_label,l_un_rank,total"));

    let out = mvcount(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "data",
            "--split",
            "test",
            "--out",
            "metrics.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let golden = fs::read(dir.path().join("metrics.csv")).unwrap();
    let text = String::from_utf8_lossy(&golden);
    assert!(text.starts_with("row,n,mae,mse,nae,game0,game1,game2,pred_count,true_count"));
    let summary = text.lines().nth(1).unwrap();
    let cols: Vec<&str> = summary.split(',').collect();
    assert_eq!(cols[0], "summary");
    let mae: f64 = cols[2].parse().unwrap();
    let game0: f64 = cols[5].parse().unwrap();
    assert_eq!(mae, game0, "game0 must equal mae in every emitted summary");

    // golden-file reproduction: evaluating the same checkpoint again is
    // byte-identical
    let out = mvcount(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.mvct",
            "--data",
            "data",
            "--split",
            "test",
            "--out",
            "metrics2.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let replay = fs::read(dir.path().join("metrics2.csv")).unwrap();
    assert_eq!(golden, replay);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = mvcount(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", "data"],
        dir.path(),
    );
    assert!(out.status.success());

    // unknown config key: exit 2, message names the key
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate_typo = 1\n").unwrap();
    let out = mvcount(
        &["gen-data", "--config", bad.to_str().unwrap(), "--out", "x"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate_typo"));

    // missing dataset directory: data error, exit 3
    let out = mvcount(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            "nonexistent",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));

    // unknown split name: config error (2), distinct from i/o errors (3)
    let out = mvcount(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            "data",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let out = mvcount(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "data",
            "--split",
            "validation",
            "--out",
            "m.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // corrupt container magic: data error, exit 3
    let frame = dir.path().join("data/frames/scene000_frame000.mvct");
    let mut bytes = fs::read(&frame).unwrap();
    bytes[0] = b'X';
    fs::write(&frame, bytes).unwrap();
    let out = mvcount(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "data",
            "--split",
            "test",
            "--out",
            "m.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn checkpoint_grid_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = mvcount(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", "data"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = mvcount(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            "data",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success());

    // second dataset on a different grid
    let text = fs::read_to_string(&config).unwrap().replace("h = 16", "h = 20");
    let other = dir.path().join("other.toml");
    fs::write(&other, text).unwrap();
    let out = mvcount(
        &["gen-data", "--config", other.to_str().unwrap(), "--out", "data20"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mvcount(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "data20",
            "--split",
            "test",
            "--out",
            "m.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match dataset grid"));
}

#[test]
fn gradcheck_passes_and_mode_flags_select_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvcount(&["gradcheck", "--seed", "11"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("conv2d"));
    assert!(stdout.contains("rank_penalty"));
    assert!(stdout.contains("pipeline_mvur_unlabeled"));
    assert!(!stdout.contains("FAIL"));

    // baseline1 never logs ranking losses on unlabeled branches; mvpr does
    let config = write_tiny_config(dir.path());
    let out = mvcount(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", "data"],
        dir.path(),
    );
    assert!(out.status.success());
    for (mode, run) in [("baseline1", "run_b1"), ("mvpr", "run_pr")] {
        let out = mvcount(
            &[
                "train",
                "--config",
                config.to_str().unwrap(),
                "--mode",
                mode,
                "--data",
                "data",
                "--out",
                run,
            ],
            dir.path(),
        );
        assert!(out.status.success());
    }
    let b1 = fs::read_to_string(dir.path().join("run_b1/train_log.csv")).unwrap();
    for line in b1.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[2] == "unlabeled" {
            assert_eq!(cols[7].parse::<f64>().unwrap(), 0.0, "baseline1 must skip unlabeled");
        }
    }
    let pr = fs::read_to_string(dir.path().join("run_pr/train_log.csv")).unwrap();
    let has_rank = pr.lines().skip(1).any(|line| {
        let cols: Vec<&str> = line.split(',').collect();
        cols[2] == "unlabeled" && cols[4].parse::<f64>().unwrap() > 0.0
    });
    assert!(has_rank, "mvpr should log nonzero l_pre_rank on some unlabeled branch");
}

#[test]
fn sweep_emits_rate_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = mvcount(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", "data"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = mvcount(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--vary",
            "rate",
            "--data",
            "data",
            "--out",
            "sweep_out",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary =
        fs::read_to_string(dir.path().join("sweep_out/sweep_summary.csv")).unwrap();
    let values: Vec<&str> =
        summary.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["5", "10", "20"]);

    let out = mvcount(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--vary",
            "bogus",
            "--data",
            "data",
            "--out",
            "sweep_bogus",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
