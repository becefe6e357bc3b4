use std::fs;
use std::path::{Path, PathBuf};

use causal_kmeans::diagnostics::{boundary_table, boundary_table_csv};
use causal_kmeans::eif::{phi_c_variance, risk_hat};
use causal_kmeans::io::{csv_text, fmt_f64};
use causal_kmeans::rng::{derive_seed, stream};
use causal_kmeans::simulation::{generate_sample, replication_scores, SimSample};
use causal_kmeans::{
    assign_folds, cluster_profiles, cross_fit, elbow_scan, hexagon_centers, load_dataset,
    minimize_semiparametric, plug_in_estimate, project, run_study, Codebook, CounterfactualMatrix,
    CrossFitScores, Dataset, Error, Estimator, Matrix, Result, SimConfig,
};

use crate::config::{RunConfig, SimulationConfig, Source};
use crate::plot::{LogLogChart, Series};

const TAG_DATA: u64 = 1;
const TAG_FOLDS: u64 = 2;
const TAG_FIT: u64 = 3;
const TAG_ELBOW: u64 = 5;

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Design settings for a single sample drawn from a simulation block.
fn sample_config(cfg: &RunConfig, sim: &SimulationConfig) -> Result<SimConfig> {
    Ok(SimConfig {
        delta: sim.delta,
        sigma: sim.sigma,
        seed: cfg.seed,
        folds: cfg.folds,
        nuisance: cfg.nuisance()?,
        oracle_nuisances: sim.oracle_nuisances,
        ..SimConfig::default()
    })
}

fn simulated_sample(cfg: &RunConfig, sim: &SimulationConfig) -> Result<(SimSample, SimConfig)> {
    let design = sample_config(cfg, sim)?;
    if !(sim.delta >= 0.0 && sim.sigma >= 0.0) {
        return Err(Error::Config("delta and sigma must be nonnegative".into()));
    }
    let sample = generate_sample(sim.n, &mut stream(cfg.seed, &[TAG_DATA]), &design)?;
    Ok((sample, design))
}

/// Loads or simulates the data and cross-fits the scores in the configured
/// parametrization.
fn prepare_scores(cfg: &RunConfig) -> Result<(Dataset, CrossFitScores)> {
    let (dataset, scores) = match cfg.source() {
        Source::Input(input) => {
            let dataset = load_dataset(&input.path, input.arms)?;
            if dataset.n() < cfg.folds {
                return Err(Error::Data(format!(
                    "{} units cannot be split into {} folds",
                    dataset.n(),
                    cfg.folds
                )));
            }
            let folds = assign_folds(dataset.n(), cfg.folds, derive_seed(cfg.seed, &[TAG_FOLDS]))?;
            let scores = cross_fit(&dataset, &folds, &cfg.nuisance()?)?;
            (dataset, scores)
        }
        Source::Simulation(sim) => {
            let (sample, design) = simulated_sample(cfg, sim)?;
            let scores = replication_scores(&sample, cfg.seed, &design)?;
            (sample.dataset, scores)
        }
    };
    let scores = scores.reparametrize(cfg.parametrization()?)?;
    Ok((dataset, scores))
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let estimator = cfg.estimator()?;
    let (dataset, scores) = prepare_scores(cfg)?;
    let plug = plug_in_estimate(
        &scores.mu_hat,
        cfg.k,
        cfg.restarts,
        derive_seed(cfg.seed, &[TAG_FIT]),
        &cfg.lloyd_options(),
    )?;
    let result = match estimator {
        Estimator::PlugIn => plug,
        Estimator::Semiparametric => minimize_semiparametric(&scores, &plug.codebook, &cfg.semi_options()?)?,
    };
    let (residual, variance, risk_hat_value) = match estimator {
        Estimator::PlugIn => (String::new(), String::new(), fmt_f64(risk_hat(&scores, &result.codebook))),
        Estimator::Semiparametric => (
            result.moment_residual.map(fmt_f64).unwrap_or_default(),
            fmt_f64(phi_c_variance(&scores, &result.codebook)),
            fmt_f64(result.risk),
        ),
    };
    let report = csv_text(
        &[
            "estimator",
            "n",
            "k",
            "risk",
            "risk_hat",
            "iterations",
            "converged",
            "moment_residual",
            "phi_variance",
        ],
        [vec![
            estimator.name().to_string(),
            dataset.n().to_string(),
            cfg.k.to_string(),
            fmt_f64(result.risk),
            risk_hat_value,
            result.iterations.to_string(),
            result.converged.to_string(),
            residual,
            variance,
        ]],
    );
    Ok(vec![
        write(out, "centers.csv", &result.codebook.to_csv())?,
        write(out, "assignments.csv", &result.assignments_csv())?,
        write(out, "fit_report.csv", &report)?,
    ])
}

pub fn simulate(cfg: &RunConfig, out: &Path, workers: usize, plots: bool) -> Result<Vec<PathBuf>> {
    let sim = cfg.sim_config()?;
    let study = run_study(&sim, workers)?;
    let mut written = vec![
        write(out, "study_raw.csv", &study.raw_csv())?,
        write(out, "study_summary.csv", &study.summary_csv())?,
    ];
    if plots {
        let series = |metric: fn(&causal_kmeans::simulation::SummaryRow) -> f64| -> Vec<Series> {
            sim.estimators
                .iter()
                .map(|&est| Series {
                    label: est.name().replace('_', "-"),
                    points: sim
                        .ns
                        .iter()
                        .filter_map(|&n| study.summary_for(n, est).map(|r| (n as f64, metric(r))))
                        .collect(),
                })
                .collect()
        };
        let risk = LogLogChart {
            title: "Excess risk".into(),
            x_label: "sample size n".into(),
            y_label: "median excess risk".into(),
            series: series(|r| r.median_excess_risk),
        };
        let error = LogLogChart {
            title: "Codebook error".into(),
            x_label: "sample size n".into(),
            y_label: "median per-center L1 error".into(),
            series: series(|r| r.median_per_center_l1),
        };
        written.push(write(out, "excess_risk.svg", &risk.to_svg())?);
        written.push(write(out, "codebook_error.svg", &error.to_svg())?);
    }
    Ok(written)
}

pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (dataset, points, centers, parametrization) = match cfg.source() {
        Source::Simulation(sim) => {
            let (sample, _) = simulated_sample(cfg, sim)?;
            (sample.dataset, sample.mu, hexagon_centers(), causal_kmeans::Parametrization::Levels)
        }
        Source::Input(input) => {
            let path = input
                .centers
                .as_ref()
                .ok_or_else(|| Error::Config("diagnose needs input.centers".into()))?;
            let file = fs::File::open(path).map_err(|e| {
                Error::Data(format!("cannot open centers file {}: {e}", path.display()))
            })?;
            let centers = Codebook::from_csv(file)?;
            let (dataset, scores) = prepare_scores(cfg)?;
            if centers.p() != scores.p() {
                return Err(Error::Data(format!(
                    "centers have {} coordinates, data have {} arms",
                    centers.p(),
                    scores.p()
                )));
            }
            (dataset, scores.mu_hat, centers, cfg.parametrization()?)
        }
    };
    let d = &cfg.diagnose;
    let elbow = elbow_scan(&points, d.k_min, d.k_max, cfg.restarts, derive_seed(cfg.seed, &[TAG_ELBOW]))?;
    let boundary = boundary_table(&points, &centers, &d.t_grid);
    let labels: Vec<usize> = points.rows_iter().map(|x| project(x, &centers).0).collect();
    let profile = cluster_profiles(
        &dataset,
        &CounterfactualMatrix::new(points.clone(), parametrization)?,
        &labels,
        centers.k(),
    )?;
    Ok(vec![
        write(out, "elbow.csv", &elbow.to_csv())?,
        write(out, "boundary_mass.csv", &boundary_table_csv(&boundary))?,
        write(out, "cluster_profiles.csv", &profile.covariates_csv())?,
        write(out, "cluster_cate.csv", &profile.cate_csv())?,
        write(out, "cate_values.csv", &profile.cate_values_csv())?,
    ])
}

/// Writes one simulated sample in the input format, plus its true means.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let sim = match cfg.source() {
        Source::Simulation(sim) => sim,
        Source::Input(_) => return Err(Error::Config("generate needs a simulation block".into())),
    };
    let (sample, _) = simulated_sample(cfg, sim)?;
    let mut buf = Vec::new();
    sample.dataset.write_csv(&mut buf)?;
    let data = String::from_utf8(buf).expect("csv output is utf-8");
    let truth = oracle_csv(&sample.mu, &sample.sectors);
    Ok(vec![write(out, "sample.csv", &data)?, write(out, "oracle_mu.csv", &truth)?])
}

fn oracle_csv(mu: &Matrix, sectors: &[usize]) -> String {
    csv_text(
        &["unit", "mu1", "mu2", "sector"],
        mu.rows_iter().zip(sectors).enumerate().map(|(i, (row, s))| {
            vec![(i + 1).to_string(), fmt_f64(row[0]), fmt_f64(row[1]), s.to_string()]
        }),
    )
}
