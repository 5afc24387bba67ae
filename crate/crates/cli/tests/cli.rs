use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vitp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitp"))
        .args(args)
        .env_remove("VITP_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FAST: [&str; 12] = [
    "--steps",
    "6",
    "--epochs",
    "2",
    "--warmup-epochs",
    "1",
    "--train-samples",
    "48",
    "--eval-samples",
    "16",
    "--batch-size",
    "16",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let d = dir.display().to_string();
    let mut args = vec!["train", "--log-every", "0", "--out-dir", &d];
    args.extend(FAST);
    args.extend(extra);
    vitp(&args)
}

#[test]
fn schedule_prints_width_sides() {
    let o = vitp(&[
        "schedule",
        "--depth",
        "1",
        "--heads",
        "12",
        "--embed-dim",
        "48",
        "--image-px",
        "32",
        "--patch-px",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "layer 0: [3,5,9,11,13,15,19,21,23,25,29,31]\n");
}

#[test]
fn overrides_accept_equals_form_and_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d.cfg");
    fs::write(&cfg, "mrfa_mode = D\ndepth = 3\n").unwrap();
    let o = vitp(&["schedule", "-c", cfg.to_str().unwrap(), "--heads=1", "--embed-dim=8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "layer 0: [3]\nlayer 1: [5]\nlayer 2: [7]\n");
}

#[test]
fn config_errors_exit_one() {
    let o = vitp(&["schedule", "--suppression", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("suppression"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "depth = 2\nwindow = 4\n").unwrap();
    let o = vitp(&["schedule", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("window") && stderr(&o).contains(":2"),
        "{}",
        stderr(&o)
    );

    for args in [
        &["schedule", "--heads"][..],
        &["schedule", "heads"],
        &["nonsense"],
        &["ablate", "--grid", "x"],
    ] {
        assert_eq!(vitp(args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn missing_or_corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.bin");
    let m = missing.to_str().unwrap();
    for sub in ["eval", "mad", "bias-hist"] {
        assert_eq!(vitp(&[sub, "--checkpoint", m]).status.code(), Some(2), "{sub}");
    }
    assert_eq!(vitp(&["train", "--resume", m]).status.code(), Some(2));
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let o = vitp(&["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn train_then_analyze_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("steps=6 "), "{}", stdout(&o));
    for f in [
        "config.txt",
        "checkpoint.bin",
        "metrics_steps.csv",
        "metrics_epochs.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ck = run.join("checkpoint.bin");
    let ck = ck.to_str().unwrap();

    let o = vitp(&["eval", "--checkpoint", ck]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("samples=16 eval_acc="));

    let o = vitp(&["mad", "--checkpoint", ck, "--batch", "4"]);
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("layer,head,window_side_at_init,mad_px"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let out = dir.path().join("hist.csv");
    let o = vitp(&[
        "bias-hist",
        "--checkpoint",
        ck,
        "--bins",
        "5",
        "--lo",
        "-100",
        "--hi",
        "0",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = fs::read_to_string(&out).unwrap();
    assert_eq!(hist.lines().count(), 6);
    let total: u64 = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    // two tiny layers, two heads, 7x7 relative tables
    assert_eq!(total, 2 * 2 * 49);
    assert_eq!(
        vitp(&["bias-hist", "--checkpoint", ck, "--lo", "-1"]).status.code(),
        Some(1)
    );
}

#[test]
fn resume_continues_and_refuses_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &["--checkpoint-every", "3"]).status.success());
    let ck = run.join("checkpoint.bin");
    let o = vitp(&["train", "--resume", ck.to_str().unwrap(), "--log-every", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("steps=6 "));
    assert_eq!(
        fs::read_to_string(run.join("metrics_steps.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );
    let o = vitp(&["train", "--resume", ck.to_str().unwrap(), "--depth", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--log-every", "0"];
    args.extend(FAST);
    let o = Command::new(env!("CARGO_BIN_EXE_vitp"))
        .args(&args)
        .env("VITP_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("config.txt").is_file());

    let explicit = dir.path().join("explicit");
    let d = explicit.display().to_string();
    let mut args = vec!["train", "--log-every", "0", "--out-dir", &d];
    args.extend(FAST);
    let o = Command::new(env!("CARGO_BIN_EXE_vitp"))
        .args(&args)
        .env("VITP_OUT_DIR", dir.path().join("ignored"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(explicit.join("config.txt").is_file());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn gradcheck_reports_and_sets_exit_code() {
    let small = [
        "--depth",
        "1",
        "--embed-dim",
        "8",
        "--heads",
        "2",
        "--image-px",
        "8",
        "--patch-px",
        "4",
        "--num-classes",
        "4",
        "--train-samples",
        "4",
        "--eval-samples",
        "4",
    ];
    let mut args = vec!["gradcheck", "--eps", "1e-5", "--threshold", "1e-3"];
    args.extend(small);
    let o = vitp(&args);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("max_rel_err="));

    let mut args = vec!["gradcheck", "--eps", "1e-1", "--threshold", "1e-8"];
    args.extend(small);
    let o = vitp(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
}

#[test]
fn ablation_writes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let mut args = vec!["ablate", "--grid", "bias-method", "--out-dir", &d];
    args.extend(FAST);
    let o = vitp(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().skip(1).map(str::to_string).collect();
    assert_eq!(rows.len(), 2, "{rows:?}");
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap(), stdout(&o));
    for r in rows {
        let cell = r.split(',').next().unwrap();
        assert!(dir.path().join(cell).join("metrics_steps.csv").is_file(), "{cell}");
    }
}
