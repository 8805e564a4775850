use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference_smib.toml")
}

fn sgdse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgdse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, edit(fs::read_to_string(reference()).unwrap())).unwrap();
    p
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = sgdse(&[
        "simulate",
        "--config",
        path(&reference()),
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["trajectory.csv", "pmu_g1.csv", "manifest.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"simulate\""));
    assert!(manifest.contains("seed = 1"));
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = sgdse(&[
            "simulate",
            "--config",
            path(&reference()),
            "--out",
            path(&out),
            "--seed",
            seed,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read(out.join("trajectory.csv")).unwrap()
    };
    let a = run("a", "4");
    assert_eq!(a, run("b", "4"));
    assert_ne!(a, run("c", "5"));
}

#[test]
fn empty_environment_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = sgdse(&[
        "simulate",
        "--config",
        path(&reference()),
        "--out",
        path(&a),
    ]);
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_sgdse"))
        .args([
            "simulate",
            "--config",
            path(&reference()),
            "--out",
            path(&b),
        ])
        .env_clear()
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trajectory.csv", "pmu_g1.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn sampling_faster_than_integration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |s| s.replace("rate = 60.0", "rate = 2000.0"));
    let o = sgdse(&[
        "simulate",
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("sampling rate 2000 Hz exceeds the integration rate"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_keys_and_bad_usage_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |s| s.replace("seed = 1", "seed = 1\nsede = 2"));
    let o = sgdse(&[
        "simulate",
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));

    assert_eq!(sgdse(&["launch"]).status.code(), Some(1));
    assert_eq!(sgdse(&["simulate"]).status.code(), Some(1));
    let o = sgdse(&["simulate", "--config", path(&reference())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn inline_observe_reports_settling_and_excitation_warning() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = sgdse(&[
        "observe",
        "--config",
        path(&reference()),
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text
        .lines()
        .find(|l| l.starts_with("g1 partial: settling time"))
        .expect(&text);
    let secs: f64 = line.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!((0.5..2.0).contains(&secs), "{line}");
    assert!(stderr(&o).contains("interval excitation not reached"));

    let metrics = fs::read_to_string(out.join("metrics_partial_g1.txt")).unwrap();
    assert!(metrics.contains("observer = partial"));
    let full = fs::read_to_string(out.join("metrics_full_g1.txt")).unwrap();
    assert!(full.contains("excitation_time = none"));
    for f in [
        "estimates_partial_g1.csv",
        "estimates_full_g1.csv",
        "estimator_g1.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn recorded_stream_matches_inline_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(sgdse(&[
        "simulate",
        "--config",
        path(&reference()),
        "--out",
        path(&sim)
    ])
    .status
    .success());
    let inline = dir.path().join("inline");
    assert!(sgdse(&[
        "observe",
        "--config",
        path(&reference()),
        "--out",
        path(&inline)
    ])
    .status
    .success());
    let rec = dir.path().join("rec");
    let o = sgdse(&[
        "observe",
        "--config",
        path(&reference()),
        "--out",
        path(&rec),
        "--pmu-input",
        path(&sim.join("pmu_g1.csv")),
        "--truth",
        path(&sim.join("trajectory.csv")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "estimates_partial_g1.csv",
        "estimates_full_g1.csv",
        "metrics_partial_g1.txt",
    ] {
        assert_eq!(
            fs::read(inline.join(f)).unwrap(),
            fs::read(rec.join(f)).unwrap(),
            "{f}"
        );
    }
}

fn recorded_stream(dir: &Path) -> PathBuf {
    let sim = dir.join("sim");
    assert!(sgdse(&[
        "simulate",
        "--config",
        path(&reference()),
        "--out",
        path(&sim)
    ])
    .status
    .success());
    sim.join("pmu_g1.csv")
}

#[test]
fn full_observer_requires_field_voltage() {
    let dir = tempfile::tempdir().unwrap();
    let pmu = recorded_stream(dir.path());
    let stripped: String = fs::read_to_string(&pmu)
        .unwrap()
        .lines()
        .map(|l| format!("{}\n", &l[..l.rfind(',').unwrap()]))
        .collect();
    let cut = dir.path().join("no_u2.csv");
    fs::write(&cut, stripped).unwrap();
    let o = sgdse(&[
        "observe",
        "--config",
        path(&reference()),
        "--out",
        path(&dir.path().join("o")),
        "--pmu-input",
        path(&cut),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("input `u2` is not measured"),
        "{}",
        stderr(&o)
    );

    let partial = write_config(dir.path(), |s| {
        s.replace("kind = \"both\"", "kind = \"partial\"")
    });
    let o = sgdse(&[
        "observe",
        "--config",
        path(&partial),
        "--out",
        path(&dir.path().join("p")),
        "--pmu-input",
        path(&cut),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn corrupt_row_is_reported_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let pmu = recorded_stream(dir.path());
    let mut lines: Vec<String> = fs::read_to_string(&pmu)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let mut fields: Vec<&str> = lines[7].split(',').collect();
    fields[2] = "abc";
    lines[7] = fields.join(",");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = sgdse(&[
        "observe",
        "--config",
        path(&reference()),
        "--out",
        path(&dir.path().join("o")),
        "--pmu-input",
        path(&bad),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 8"), "{}", stderr(&o));
}

#[test]
fn verify_prints_every_criterion() {
    let o = sgdse(&["verify"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| l.contains("] criterion "))
        .collect();
    assert_eq!(lines.len(), 8, "{text}");
    let all_pass = lines.iter().all(|l| l.starts_with("[PASS]"));
    assert_eq!(o.status.code(), Some(if all_pass { 0 } else { 2 }));
}
