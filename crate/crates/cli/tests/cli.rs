use std::path::Path;
use std::process::{Command, Output};

use hyperfscil::metrics::RunReport;

const BIN: &str = env!("CARGO_BIN_EXE_hyperfscil");

fn hyperfscil(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("HYPERFSCIL_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn quick_run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--preset",
        "synthetic-fine",
        "--base-epochs",
        "1",
        "--inc-epochs",
        "1",
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    hyperfscil(&args)
}

fn read_report(dir: &Path) -> RunReport {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = hyperfscil(&[
            "gen-data",
            "--preset",
            "synthetic-fine",
            "--seed",
            "7",
            "--out",
            p(d),
        ]);
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("seed 7"));
    }
    for f in ["manifest.json", "images.bin", "text.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(
        hyperfscil(&["gen-data", "--preset", "synthetic-fine"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(hyperfscil(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hyperfscil(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        quick_run(dir.path(), &["--tau", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        quick_run(dir.path(), &["--gamma", "-1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        quick_run(dir.path(), &["--preset", "nope"]).status.code(),
        Some(2)
    );
    assert_eq!(
        hyperfscil(&["run", "--preset", "synthetic-fine"])
            .status
            .code(),
        Some(2)
    );
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"tua": 0.1}"#).unwrap();
    assert_eq!(
        quick_run(dir.path(), &["--config", p(&cfg)]).status.code(),
        Some(2)
    );
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(hyperfscil(&["gen-data", "--seed", "1", "--out", p(&data)])
        .status
        .success());
    let bin = data.join("images.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    let out = quick_run(&dir.path().join("r"), &["--dataset", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    assert_eq!(
        hyperfscil(&["report", p(&dir.path().join("missing.json"))])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn run_writes_outputs_and_echo_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = quick_run(&first, &["--no-ssp", "--no-hyp", "--seed", "5"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_report(&first);
    assert!(!report.ssp && !report.hyp);
    assert_eq!(report.sim_mode, "cosine");
    assert_eq!(report.seed, 5);
    assert!(report.trainable_params_incremental < report.trainable_params_base);

    let metrics = std::fs::read_to_string(first.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "session,accuracy,trainable_params,lr_final");
    assert_eq!(lines.len(), report.sessions.len() + 1);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
    for s in 0..report.sessions.len() {
        assert!(first.join(format!("heatmap_s{s}.csv")).exists());
    }

    let second = dir.path().join("second");
    let echo = first.join("config.json");
    let out = hyperfscil(&["run", "--config", p(&echo), "--out", p(&second)]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(first.join("report.json")).unwrap(),
        std::fs::read(second.join("report.json")).unwrap()
    );
}

#[test]
fn env_seed_is_used_only_as_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, env: Option<&str>, extra: &[&str]| {
        let out = dir.path().join(sub);
        let mut cmd = Command::new(BIN);
        cmd.args([
            "run",
            "--preset",
            "synthetic-fine",
            "--base-epochs",
            "1",
            "--inc-epochs",
            "1",
            "--out",
            p(&out),
        ])
        .args(extra)
        .env_remove("HYPERFSCIL_SEED");
        if let Some(v) = env {
            cmd.env("HYPERFSCIL_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        read_report(&out).seed
    };
    assert_eq!(run("a", Some("21"), &[]), 21);
    assert_eq!(run("b", Some("21"), &["--seed", "4"]), 4);
}

#[test]
fn report_and_heatmap_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperfscil(&[
        "report",
        "--row",
        "84.5, 81.9, 80.7, 78.4, 77.8, 77.0, 76.1, 76.0, 74.8, 75.1, 74.9",
        "--json",
        p(&dir.path().join("s.json")),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Avg 77.9 PD 9.6"), "{text}");
    assert!(text.contains("± 0.00"));
    assert_eq!(
        hyperfscil(&["report", "--row", "1,abc"]).status.code(),
        Some(2)
    );

    let run_dir = dir.path().join("r");
    assert!(quick_run(&run_dir, &[]).status.success());
    let csv = dir.path().join("h.csv");
    let out = hyperfscil(&[
        "heatmap",
        "--report",
        p(&run_dir.join("report.json")),
        "--session",
        "0",
        "--out",
        p(&csv),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&csv).unwrap(),
        std::fs::read(run_dir.join("heatmap_s0.csv")).unwrap()
    );
    assert_eq!(
        hyperfscil(&[
            "heatmap",
            "--report",
            p(&run_dir.join("report.json")),
            "--session",
            "99"
        ])
        .status
        .code(),
        Some(2)
    );

    let report = read_report(&run_dir);
    let mut tampered = report.clone();
    tampered.avg += 1.0;
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_vec(&tampered).unwrap()).unwrap();
    assert_eq!(hyperfscil(&["report", p(&bad)]).status.code(), Some(3));
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperfscil(&[
        "ablate",
        "--preset",
        "synthetic-fine",
        "--base-epochs",
        "1",
        "--inc-epochs",
        "1",
        "--seeds",
        "0,1",
        "--out",
        p(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "name,hyp,ssp,final_accuracy,final_std,avg,pd");
    let names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["Base", "w/o SSP", "w/o Hyp", "Ours"]);
}
