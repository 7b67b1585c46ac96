use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use infodesign::{Error, GameSpec};
use infodesign_cli::{exit_code, EXIT_INPUT, EXIT_OK, EXIT_SOLVER, EXIT_VERIFY};

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../corpus/{name}.json"))
}

fn infodesign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infodesign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("summary.txt")).unwrap()
}

/// Files listed after the `files:` line of a summary.
fn declared_files(summary: &str) -> Vec<String> {
    summary
        .lines()
        .skip_while(|l| *l != "files:")
        .skip(1)
        .map(|l| l.trim().to_string())
        .collect()
}

fn table_sender_value(summary: &str) -> f64 {
    let line = summary
        .lines()
        .find(|l| l.trim_start().starts_with("tables:"))
        .unwrap();
    let first = line.trim_start()["tables:".len()..]
        .split(',')
        .next()
        .unwrap();
    first.trim().parse().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(infodesign(&["--help"]).status.code(), Some(EXIT_OK));
    assert_eq!(
        infodesign(&["solve", "--help"]).status.code(),
        Some(EXIT_OK)
    );
    assert_eq!(infodesign(&["--version"]).status.code(), Some(EXIT_OK));
}

#[test]
fn bad_flags_exit_one() {
    assert_eq!(infodesign(&[]).status.code(), Some(EXIT_INPUT));
    assert_eq!(
        infodesign(&["solve", "--spec", "x.json", "--mode", "nash"])
            .status
            .code(),
        Some(EXIT_INPUT)
    );
    let spec = corpus("judge");
    let out = infodesign(&["solve", "--spec", spec.to_str().unwrap(), "--grid", "0"]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
}

#[test]
fn missing_spec_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = infodesign(&[
        "solve",
        "--spec",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn invalid_spec_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = GameSpec::from_path(corpus("judge")).unwrap();
    spec.discount = 1.5;
    spec.initial = vec![0.5, 0.6];
    let path = dir.path().join("bad.json");
    std::fs::write(&path, spec.to_json_pretty().unwrap()).unwrap();

    let out = infodesign(&["validate", "--spec", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("discount"), "{text}");
    assert!(text.contains("initial"), "{text}");

    let out = infodesign(&[
        "solve",
        "--spec",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_INPUT));

    let ok = infodesign(&["validate", "--spec", corpus("judge").to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(EXIT_OK));
}

#[test]
fn judge_commitment_value_and_verification() {
    let dir = tempfile::tempdir().unwrap();
    let spec = corpus("judge");
    let out = infodesign(&[
        "solve",
        "--mode",
        "cpse",
        "--spec",
        spec.to_str().unwrap(),
        "--grid",
        "100",
        "--verify",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = summary(dir.path());
    assert!((table_sender_value(&text) - 0.6).abs() <= 0.02, "{text}");
    assert!(text.contains("verification: PASS"), "{text}");
}

#[test]
fn verification_fail_exits_three() {
    // At the optimal commitment the judge is indifferent up to the tie
    // tolerance; a deviation tolerance below it turns that into a FAIL.
    let dir = tempfile::tempdir().unwrap();
    let spec = corpus("judge");
    let out = infodesign(&[
        "verify",
        "--mode",
        "cpse",
        "--spec",
        spec.to_str().unwrap(),
        "--grid",
        "7",
        "--tol-dev",
        "1e-300",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_VERIFY));
    let text = summary(dir.path());
    assert!(text.contains("verification: FAIL"), "{text}");
    let mut rdr = csv::Reader::from_path(dir.path().join("verification.csv")).unwrap();
    let verdicts: Vec<String> = rdr.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert!(verdicts.iter().any(|v| v == "FAIL"));
}

#[test]
fn zero_paths_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = corpus("persuasion");
    let out = infodesign(&[
        "rollout",
        "--spec",
        spec.to_str().unwrap(),
        "--grid",
        "10",
        "--paths",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let traj = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1);
    assert!(traj.starts_with("path,t,x,s,a,r1,"));
    let text = summary(dir.path());
    assert!(text.contains("exact:"));
    assert!(!text.contains("rollout ("));
}

#[test]
fn report_declares_files_that_parse() {
    let dir = tempfile::tempdir().unwrap();
    let spec = corpus("two_receivers");
    let out = infodesign(&[
        "report",
        "--mode",
        "cpse",
        "--spec",
        spec.to_str().unwrap(),
        "--grid",
        "8",
        "--paths",
        "200",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let files = declared_files(&summary(dir.path()));
    for name in [
        "value_tables.csv",
        "policy.csv",
        "value_slice.csv",
        "trajectories.csv",
        "verification.csv",
        "horizon_curve.csv",
        "summary.txt",
    ] {
        assert!(
            files.iter().any(|f| f == name),
            "{name} not declared in {files:?}"
        );
    }
    for f in files.iter().filter(|f| f.ends_with(".csv")) {
        let mut rdr = csv::Reader::from_path(dir.path().join(f)).unwrap();
        let width = rdr.headers().unwrap().len();
        let mut rows = 0;
        for r in rdr.records() {
            assert_eq!(r.unwrap().len(), width, "{f}");
            rows += 1;
        }
        assert!(rows > 0, "{f} is empty");
    }
    let mut rdr = csv::Reader::from_path(dir.path().join("horizon_curve.csv")).unwrap();
    let horizons: Vec<u32> = rdr
        .records()
        .map(|r| r.unwrap()[0].parse().unwrap())
        .collect();
    assert_eq!(horizons, (1..=horizons.len() as u32).collect::<Vec<_>>());
}

#[test]
fn direct_run_matches_binary_codes() {
    assert_eq!(infodesign_cli::run(["infodesign", "--help"]), EXIT_OK);
    assert_eq!(
        infodesign_cli::run(["infodesign", "frobnicate"]),
        EXIT_INPUT
    );
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(exit_code(&Error::InvalidSpec("x".into())), EXIT_INPUT);
    assert_eq!(
        exit_code(&Error::Io(std::io::Error::other("x"))),
        EXIT_INPUT
    );
    assert_eq!(
        exit_code(&Error::TreeTooLarge { nodes: 10, cap: 5 }),
        EXIT_SOLVER
    );
    let stage = Error::StageFailure {
        t: 1,
        point: 0,
        reason: "x".into(),
    };
    assert_eq!(exit_code(&stage), EXIT_SOLVER);
}
