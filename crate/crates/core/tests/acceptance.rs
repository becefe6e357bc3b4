//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use causal_kmeans::diagnostics::boundary_distance;
use causal_kmeans::eif::gradient;
use causal_kmeans::simulation::{
    generate_sample, jitter_second_moment, replication_scores, SimSample,
};
use causal_kmeans::{
    boundary_mass, brute_force_codebook, elbow_scan, empirical_risk, lloyd,
    minimize_semiparametric, oracle_population_risk, plug_in_estimate, risk_hat, rng, run_study,
    Codebook, CrossFitScores, Estimator, LloydOptions, Matrix, SemiOptions, SimConfig,
    StudyResult,
};
use common::*;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn oracle_risk() -> Outcome {
    let exact = oracle_population_risk(0.01) == 1.25e-4;
    let mc = jitter_second_moment(0.01, 1_000_000, &mut rng::stream(2024, &[1]));
    let rel = (mc.mean / 1.25e-4 - 1.0).abs();
    outcome(exact && rel < 0.01, format!("analytic exact={exact}, MC relative error {rel:.2e}"))
}

fn reduction_identity() -> Outcome {
    let (sample, scores) = exact_scores(1000, 2024);
    let mut rng = rng::stream(2024, &[2]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let c = random_codebook(&mut rng, k, 2, 7.0);
        worst = worst.max((risk_hat(&scores, &c) - empirical_risk(&sample.mu, &c)).abs());
    }
    let mut same = 0;
    for _ in 0..10 {
        let init = random_codebook(&mut rng, 6, 2, 6.0);
        let plain = lloyd(
            &sample.mu,
            &init,
            &LloydOptions { tol: 0.0, keep_history: true, ..Default::default() },
        );
        let semi = minimize_semiparametric(
            &scores,
            &init,
            &SemiOptions { keep_history: true, max_iter: Some(300), ..Default::default() },
        )
        .unwrap();
        same += (plain.history == semi.history) as usize;
    }
    outcome(
        worst <= 1e-12 && same == 10,
        format!("max |risk_hat - empirical_risk| = {worst:.1e}; identical iterate sequences {same}/10"),
    )
}

fn unbiasedness() -> Outcome {
    const M: usize = 100_000;
    let cfg = SimConfig { delta: 0.3, ..SimConfig::default() };
    let s = generate_sample(M, &mut rng::stream(2024, &[3]), &cfg).unwrap();
    // E[μ0] = E[μ1] = 0 by the symmetry of the sector probabilities
    let z_scores = |mu: Matrix, pi: Matrix| -> Vec<f64> {
        let sc = CrossFitScores::from_nuisance_values(&s.dataset, mu, pi, vec![1; M], 1).unwrap();
        (0..2)
            .map(|a| {
                let col = sc.phi1.column(a);
                let mean = col.iter().sum::<f64>() / M as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (M - 1) as f64;
                mean / (var / M as f64).sqrt()
            })
            .collect()
    };
    let wrong_mu = Matrix::from_rows(&vec![[5.0, -3.0]; M]).unwrap();
    let wrong_pi = Matrix::from_rows(&vec![[0.5, 0.5]; M]).unwrap();
    let cases = [
        ("true", z_scores(s.mu.clone(), s.propensity_matrix())),
        ("wrong mu", z_scores(wrong_mu, s.propensity_matrix())),
        ("wrong pi", z_scores(s.mu.clone(), wrong_pi)),
    ];
    let pass = cases.iter().all(|(_, z)| z.iter().all(|v| v.abs() < 4.0));
    let detail = cases
        .iter()
        .map(|(name, z)| format!("{name}: z=({:.2}, {:.2})", z[0], z[1]))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn brute_force() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = rng::stream(2024, &[4, trial]);
        let n = rng.random_range(4..=10);
        let k = rng.random_range(1..=3);
        let pts = random_points(&mut rng, n, 2, 5.0);
        let fit = plug_in_estimate(&pts, k, 20, trial, &LloydOptions::default()).unwrap();
        let oracle = empirical_risk(&pts, &brute_force_codebook(&pts, k).unwrap());
        worst = worst.max((fit.risk - oracle).abs());
    }
    outcome(worst <= 1e-9, format!("max risk gap over 50 instances {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let cfg = SimConfig::default();
    let s = generate_sample(500, &mut rng::stream(2024, &[5]), &cfg).unwrap();
    let scores = replication_scores(&s, 2024, &cfg).unwrap();
    let mut rng = rng::stream(2024, &[5, 1]);
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 20 {
        let c = perturbed_hexagon(&mut rng, 1.5);
        if scores.mu_hat.rows_iter().any(|x| boundary_distance(x, &c).bisector < 1e-3) {
            continue;
        }
        checked += 1;
        let g = gradient(&scores, &c);
        for j in 0..c.k() {
            for a in 0..c.p() {
                let bumped = |step: f64| {
                    let mut rows: Vec<Vec<f64>> = (0..c.k()).map(|i| c.center(i).to_vec()).collect();
                    rows[j][a] += step;
                    risk_hat(&scores, &Codebook::from_rows(&rows).unwrap())
                };
                let fd = (bumped(h) - bumped(-h)) / (2.0 * h);
                worst = worst.max((fd - g.blocks.get(j, a)).abs());
            }
        }
    }
    outcome(worst <= 1e-6, format!("max |analytic - central difference| over 20 codebooks {worst:.1e}"))
}

fn figure3(study: &StudyResult, ns: &[usize]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for &n in ns {
        let semi = study.summary_for(n, Estimator::Semiparametric).unwrap();
        let plug = study.summary_for(n, Estimator::PlugIn).unwrap();
        pass &= semi.median_excess_risk < plug.median_excess_risk;
        parts.push(format!("n={n}: {:.2e} vs {:.2e}", semi.median_excess_risk, plug.median_excess_risk));
    }
    let s_semi = study.slope_for(Estimator::Semiparametric).unwrap().excess_risk_slope;
    let s_plug = study.slope_for(Estimator::PlugIn).unwrap().excess_risk_slope;
    pass &= s_semi < s_plug && study.failures() == 0;
    parts.push(format!("slopes {s_semi:.2} vs {s_plug:.2}"));
    outcome(pass, parts.join("; "))
}

fn figure4(study: &StudyResult, ns: &[usize]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for &n in ns.iter().filter(|&&n| n >= 1000) {
        let semi = study.summary_for(n, Estimator::Semiparametric).unwrap();
        let plug = study.summary_for(n, Estimator::PlugIn).unwrap();
        pass &= semi.median_per_center_l1 < plug.median_per_center_l1;
        parts.push(format!("n={n}: {:.3} vs {:.3}", semi.median_per_center_l1, plug.median_per_center_l1));
    }
    outcome(pass, parts.join("; "))
}

fn elbow_sample(seed: u64) -> SimSample {
    generate_sample(1200, &mut rng::stream(seed, &[8]), &SimConfig::default()).unwrap()
}

fn elbow_tables() -> Vec<String> {
    use rayon::prelude::*;
    (0..20u64)
        .into_par_iter()
        .map(|seed| elbow_scan(&elbow_sample(seed).mu, 1, 10, 10, seed).unwrap().to_csv())
        .collect()
}

fn elbow() -> (Outcome, Vec<String>) {
    let mut hits = 0;
    let mut csvs = Vec::new();
    for seed in 0..20u64 {
        let table = elbow_scan(&elbow_sample(seed).mu, 1, 10, 10, seed).unwrap();
        hits += (table.last_gain_above(0.05) == Some(6)) as usize;
        csvs.push(table.to_csv());
    }
    (outcome(hits >= 18, format!("k=6 selected in {hits}/20 seeds")), csvs)
}

fn margin() -> Outcome {
    let cfg = SimConfig::default();
    let hex = causal_kmeans::hexagon_centers();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let s = generate_sample(2000, &mut rng::stream(2024, &[9, seed]), &cfg).unwrap();
        worst = worst.max(boundary_mass(&s.mu, &hex, 1.0));
    }
    outcome(worst == 0.0, format!("max boundary mass at t=1 over 20 samples {worst}"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, started: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += (!o.pass) as usize;
        println!(
            "[{tag}] criterion {id:>2} {name}: {} ({:.1}s)",
            o.detail,
            started.elapsed().as_secs_f64()
        );
    };

    let t = Instant::now();
    report(1, "oracle risk", t, oracle_risk());
    let t = Instant::now();
    report(2, "reduction identity", t, reduction_identity());
    let t = Instant::now();
    report(3, "influence-function unbiasedness", t, unbiasedness());
    let t = Instant::now();
    report(4, "brute-force k-means equivalence", t, brute_force());
    let t = Instant::now();
    report(5, "gradient check", t, gradient_check());

    let cfg = SimConfig::default();
    let t = Instant::now();
    let study = run_study(&cfg, 4).expect("study runs");
    report(6, "excess-risk ordering", t, figure3(&study, &cfg.ns));
    let t = Instant::now();
    report(7, "codebook-error ordering", t, figure4(&study, &cfg.ns));

    let t = Instant::now();
    let (elbow_outcome, elbow_csvs) = elbow();
    report(8, "elbow selects six clusters", t, elbow_outcome);
    let t = Instant::now();
    report(9, "margin certificate", t, margin());

    let t = Instant::now();
    let raw = study.raw_csv();
    let mut same = true;
    for workers in [1, 3] {
        let rerun = run_study(&cfg, workers).expect("study runs");
        same &= rerun.raw_csv() == raw && rerun.summary_csv() == study.summary_csv();
    }
    let elbow_pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    same &= elbow_pool.install(elbow_tables) == elbow_csvs;
    report(
        10,
        "determinism",
        t,
        outcome(same, format!("study reruns with 1 and 3 workers and elbow rerun byte-identical: {same}")),
    );

    if failed == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
