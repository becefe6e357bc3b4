use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-kmeans"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn generate(dir: &Path, n: usize) -> String {
    let o = run(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--set",
        &format!("simulation.n={n}"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("sample.csv").to_str().unwrap().to_string()
}

fn input_config(dir: &Path, data: &str, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!("k = 6\nestimator = \"semiparametric\"\n{extra}\n[input]\npath = {data:?}\narms = 2\n"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn fit_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 600);
    let cfg = input_config(dir.path(), &data, "");
    let out = dir.path().join("fit");
    let o = run(&["fit", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["centers.csv", "assignments.csv", "fit_report.csv"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert!(text.ends_with('\n'));
    }
    let centers = fs::read_to_string(out.join("centers.csv")).unwrap();
    assert_eq!(centers.lines().count(), 7);
    assert!(centers.starts_with("cluster,c1,c2\n"));
    let assignments = fs::read_to_string(out.join("assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), 601);
    let report = fs::read_to_string(out.join("fit_report.csv")).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("semiparametric,600,6,"));

    // plug-in via an override, and reruns are byte-identical
    let again = dir.path().join("again");
    for target in [&out, &again] {
        let o = run(&["fit", "--config", &cfg, "--set", "estimator=plug_in", "--out", target.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(
        fs::read(out.join("centers.csv")).unwrap(),
        fs::read(again.join("centers.csv")).unwrap()
    );
}

#[test]
fn both_sources_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 100);
    let cfg = input_config(dir.path(), &data, "");
    let o = run(&["fit", "--config", &cfg, "--set", "simulation.reps=1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = run(&["fit", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 2);
    let o = run(&["fit", "--config", &cfg, "--set", "k=0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "y,a,x1\n1.0,1,0.5\nabc,2,0.1\n2.0,2,0.3\n").unwrap();
    let cfg = input_config(dir.path(), data.to_str().unwrap(), "folds = 2");
    let o = run(&["fit", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 2") && err.contains("column y"), "{err}");

    let missing = input_config(dir.path(), "/nonexistent/data.csv", "");
    assert_eq!(code(&run(&["fit", "--config", &missing, "--out", dir.path().to_str().unwrap()])), 3);
}

#[test]
fn simulate_writes_tables_and_charts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let args = |target: &Path, workers: &str| {
        run(&[
            "simulate",
            "--set",
            "simulation.ns=[200, 400]",
            "--set",
            "simulation.reps=2",
            "--set",
            "simulation.eval_draws=10000",
            "--workers",
            workers,
            "--plots",
            "--out",
            target.to_str().unwrap(),
        ])
    };
    let o = args(&out, "2");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let raw = fs::read_to_string(out.join("study_raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 2 * 2);
    let summary = fs::read_to_string(out.join("study_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
    for svg in ["excess_risk.svg", "codebook_error.svg"] {
        assert!(fs::read_to_string(out.join(svg)).unwrap().starts_with("<svg"));
    }

    let rerun = dir.path().join("rerun");
    assert_eq!(code(&args(&rerun, "1")), 0);
    for f in ["study_raw.csv", "study_summary.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap());
    }
}

#[test]
fn simulate_rejects_zero_reps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--set", "simulation.reps=0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("study_raw.csv").exists());
}

#[test]
fn diagnose_on_simulated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diag.toml");
    fs::write(&cfg, "[simulation]\nn = 1200\n[diagnose]\nk_min = 1\nk_max = 10\nt_grid = [0.1, 0.5, 1.0]\n").unwrap();
    let o = run(&["diagnose", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let elbow = fs::read_to_string(dir.path().join("elbow.csv")).unwrap();
    assert_eq!(elbow.lines().count(), 11);
    let mass = fs::read_to_string(dir.path().join("boundary_mass.csv")).unwrap();
    let rows: Vec<&str> = mass.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[1].parse::<f64>().unwrap(), 0.0);
    }
    for f in ["cluster_profiles.csv", "cluster_cate.csv", "cate_values.csv"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn diagnose_input_mode_needs_centers() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 400);
    let cfg = input_config(dir.path(), &data, "");
    let out = dir.path().to_str().unwrap();
    let o = run(&["diagnose", "--config", &cfg, "--set", "input.centers=\"/nonexistent/centers.csv\"", "--out", out]);
    assert_eq!(code(&o), 3);

    assert_eq!(code(&run(&["fit", "--config", &cfg, "--out", out])), 0);
    let centers = dir.path().join("centers.csv");
    let o = run(&[
        "diagnose",
        "--config",
        &cfg,
        "--set",
        &format!("input.centers={:?}", centers.to_str().unwrap()),
        "--set",
        "diagnose.k_max=8",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cate = fs::read_to_string(dir.path().join("cluster_cate.csv")).unwrap();
    assert!(cate.starts_with("cluster,pair,cate_mean,cate_sd\n"));
    assert_eq!(cate.lines().count(), 7);
}
