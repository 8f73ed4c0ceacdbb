//! End-to-end checks of the binary: flag handling, exit codes, the run
//! directory layout, and byte-level determinism across reruns.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradrecon"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Pulls `key = value` out of a report-style file.
fn report_value(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` line in {}:\n{text}", path.display()))
        .to_string()
}

/// Every file under `dir`, relative path plus content, sorted.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn check_reports_the_twelve_kernel_case() {
    let out = run(&[
        "check", "--arch", "cnn", "--d", "32", "--c", "3", "--k", "5", "--p", "2", "--s", "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(
        stdout(&out).contains("min_kernels = 12"),
        "missing min_kernels line:\n{}",
        stdout(&out)
    );
}

#[test]
fn strict_turns_infeasible_into_exit_one() {
    let args = [
        "check", "--arch", "mlp", "--d", "784", "--n1", "3", "--n2", "10", "--b", "4",
    ];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("feasible = false"));

    let strict: Vec<&str> = args.iter().copied().chain(["--strict"]).collect();
    let out = run(&strict);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn no_arguments_prints_usage_and_exits_two() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_flag_exits_two() {
    let out = run(&["check", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_required_value_exits_two() {
    let out = run(&["check", "--arch", "mlp"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--d"), "stderr: {}", stderr(&out));
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "[model]\narch = cnn\nc = 3\nd = 16\nk = 5\np = 2\ns = 2\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();

    let out = run(&["check", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("min_kernels = 12"));

    // A narrower kernel shrinks the conv output, raising the requirement.
    let out = run(&["check", "--config", cfg, "--k", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(
        stdout(&out).contains("min_kernels = 10"),
        "override not applied:\n{}",
        stdout(&out)
    );
}

#[test]
fn attack_single_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "attack-single",
        "--arch", "mlp",
        "--layers", "784,1,10",
        "--data", "synth:blobs,seed=4",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let slot = out_dir.join("round_000").join("worker_00");
    assert!(out_dir.join("config.snapshot").is_file());
    assert!(slot.join("recon_000.pgm").is_file());
    assert!(slot.join("report.txt").is_file());

    // Closed-form recovery: essentially exact, no iterations to log.
    let l1: f64 = report_value(&slot.join("report.txt"), "mean_l1").parse().unwrap();
    assert!(l1 < 1e-8, "closed-form recovery off by {l1}");
    assert_eq!(report_value(&slot.join("report.txt"), "terminated"), "closed-form");
    assert_eq!(
        fs::read_to_string(slot.join("trajectory.csv")).unwrap(),
        "iter,loss,mean_l1\n"
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "attack-batch".to_string(),
            "--arch".into(), "mlp".into(),
            "--layers".into(), "64,6,4".into(),
            "--data".into(), "synth:blobs,d=8,classes=4,seed=9".into(),
            "--b".into(), "2".into(),
            "--iters".into(), "300".into(),
            "--eta".into(), "0.05".into(),
            "--seed".into(), "11".into(),
            "--out".into(), out.to_str().unwrap().into(),
        ]
    };
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    for out_dir in [&first, &second] {
        let argv = args(out_dir);
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        let out = run(&argv);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    let a = tree(&first);
    let b = tree(&second);
    assert!(!a.is_empty());
    assert_eq!(a, b, "rerun with identical flags changed some bytes");
}

#[test]
fn fl_run_writes_every_round_and_worker() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("fl");
    let out = run(&[
        "fl-run",
        "--arch", "mlp",
        "--layers", "64,1,4",
        "--data", "synth:blobs,d=8,classes=4,n=16,seed=2",
        "--workers", "2",
        "--rounds", "2",
        "--b", "1",
        "--attack", "on",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for round in 0..2 {
        for worker in 0..2 {
            let slot = out_dir
                .join(format!("round_{round:03}"))
                .join(format!("worker_{worker:02}"));
            let report = slot.join("report.txt");
            assert!(report.is_file(), "missing {}", report.display());
            let l1: f64 = report_value(&report, "mean_l1").parse().unwrap();
            assert!(l1 < 1e-8, "round {round} worker {worker}: L1 {l1}");
        }
    }
}

#[test]
fn sweep_kernels_emits_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep-kernels",
        "--d", "8", "--c", "1", "--k", "3", "--p", "1", "--s", "2", "--n1", "4",
        "--h-list", "1,4",
        "--iters", "40",
        "--eta", "0.2",
        "--data", "synth:gaussian,d=8",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("h = 1"), "table missing h=1:\n{text}");
    assert!(text.contains("h = 4"), "table missing h=4:\n{text}");

    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (h, l1) = l.split_once(',').unwrap();
            (h.parse().unwrap(), l1.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].0, rows[1].0), (1, 4));
    assert!(
        rows[1].1 < rows[0].1,
        "more kernels should reconstruct better: {rows:?}"
    );
}

#[test]
fn missing_data_file_exits_two() {
    let out = run(&[
        "attack-single",
        "--arch", "mlp",
        "--layers", "64,1,4",
        "--data", "/no/such/images.idx",
        "--labels", "/no/such/labels.idx",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).is_empty());
}
