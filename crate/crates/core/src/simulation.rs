//! Six-cluster hexagon design with known oracle quantities, and the Monte
//! Carlo study comparing the plug-in and influence-function estimators.
//!
//! Covariates are six independent `Unif[-1, 1]` draws. The polar angle of
//! `(x1, x2)` picks one of six 60° sectors, each mapped to a hexagon vertex;
//! small smooth jitters in `x3..x6` spread the counterfactual means around
//! their vertex. Arm 1 is control and arm 2 is treated.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{assign_folds, Dataset, ObservedUnit};
use crate::diagnostics::codebook_error;
use crate::eif::{minimize_semiparametric, SemiOptions};
use crate::error::{Error, Result};
use crate::io::{csv_text, fmt_f64};
use crate::kmeans::{nearest, plug_in_estimate, Codebook, LloydOptions};
use crate::matrix::Matrix;
use crate::nuisance::{cross_fit, CrossFitScores, NuisanceSpec};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    PlugIn,
    Semiparametric,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::PlugIn => "plug_in",
            Estimator::Semiparametric => "semiparametric",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plug_in" | "plugin" => Ok(Estimator::PlugIn),
            "semiparametric" | "semi" => Ok(Estimator::Semiparametric),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Jitter scale.
    pub delta: f64,
    /// Outcome noise standard deviation.
    pub sigma: f64,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// Cross-fitting folds.
    pub folds: usize,
    pub estimators: Vec<Estimator>,
    pub nuisance: NuisanceSpec,
    /// Use the true regression and propensity functions instead of fitting.
    pub oracle_nuisances: bool,
    pub k: usize,
    pub restarts: usize,
    pub lloyd: LloydOptions,
    pub semi: SemiOptions,
    /// Draws used to evaluate the population risk of a fitted codebook.
    pub eval_draws: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            delta: 0.01,
            sigma: 0.15,
            ns: vec![500, 1000, 2000, 4000],
            reps: 20,
            seed: 20_240_601,
            folds: 5,
            estimators: vec![Estimator::PlugIn, Estimator::Semiparametric],
            nuisance: NuisanceSpec::default(),
            oracle_nuisances: false,
            k: 6,
            restarts: 10,
            lloyd: LloydOptions::default(),
            semi: SemiOptions::default(),
            eval_draws: 200_000,
        }
    }
}

pub const MIN_EVAL_DRAWS: usize = 10_000;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if self.ns.is_empty() {
            return bad("sample-size grid is empty".into());
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if let Some(&n) = self.ns.iter().find(|&&n| n < self.folds.max(self.k)) {
            return bad(format!("sample size {n} is smaller than the fold or cluster count"));
        }
        if self.estimators.is_empty() {
            return bad("no estimators selected".into());
        }
        if self.k < 1 || self.restarts < 1 {
            return bad("k and restarts must be positive".into());
        }
        if self.eval_draws < MIN_EVAL_DRAWS {
            return bad(format!("eval_draws must be at least {MIN_EVAL_DRAWS}"));
        }
        Ok(())
    }
}

/// Vertices of the regular hexagon of circumradius 6, starting at `(6, 0)`
/// and proceeding counter-clockwise.
pub fn hexagon_centers() -> Codebook {
    let s = 3.0 * 3f64.sqrt();
    Codebook::from_rows(&[
        [6.0, 0.0],
        [3.0, s],
        [-3.0, s],
        [-6.0, 0.0],
        [-3.0, -s],
        [3.0, -s],
    ])
    .expect("finite centers")
}

const SECTOR_BREAKS: [f64; 7] = [-PI, -2.0 * PI / 3.0, -PI / 3.0, 0.0, PI / 3.0, 2.0 * PI / 3.0, PI];

/// 1-based sector of the polar angle of `(x1, x2)`.
///
/// Sectors are left-open, right-closed between consecutive breakpoints
/// `−π, −2π/3, …, π`; an angle of exactly `−π` belongs to sector 1.
pub fn sector(x1: f64, x2: f64) -> usize {
    let theta = x2.atan2(x1);
    (1..=6).find(|&s| theta <= SECTOR_BREAKS[s]).unwrap_or(6)
}

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Treated-arm propensity, clamped to `[0.05, 0.95]`.
pub fn treatment_propensity(x: &[f64]) -> f64 {
    expit(-0.2 + 0.6 * x[0] - 0.25 * x[1] + 0.2 * x[2]).clamp(0.05, 0.95)
}

pub fn jitters(x: &[f64], delta: f64) -> (f64, f64) {
    (
        delta * ((PI * x[2]).sin() + 0.5 * (PI * x[3]).cos()),
        delta * ((PI * x[4]).cos() + 0.5 * (PI * x[5]).sin()),
    )
}

/// True counterfactual means `(μ0, μ1)` and sector at covariates `x`.
pub fn counterfactual_means(x: &[f64], delta: f64, centers: &Codebook) -> ([f64; 2], usize) {
    let s = sector(x[0], x[1]);
    let c = centers.center(s - 1);
    let (j0, j1) = jitters(x, delta);
    ([c[0] + j0, c[1] + j1], s)
}

fn draw_covariates<R: Rng + ?Sized>(rng: &mut R) -> [f64; 6] {
    let mut x = [0.0; 6];
    x.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    x
}

/// One simulated sample with its oracle quantities.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub dataset: Dataset,
    /// True `(μ0, μ1)` rows.
    pub mu: Matrix,
    /// True treated-arm propensity per unit.
    pub pi1: Vec<f64>,
    /// 1-based sector labels.
    pub sectors: Vec<usize>,
}

impl SimSample {
    /// True propensity rows `(1 − π1, π1)`.
    pub fn propensity_matrix(&self) -> Matrix {
        let rows: Vec<[f64; 2]> = self.pi1.iter().map(|&p| [1.0 - p, p]).collect();
        Matrix::from_rows(&rows).expect("two columns")
    }
}

/// Draws `n` units. Per unit the generator is consumed in a fixed order:
/// six covariates, the treatment uniform, then the noise normal.
pub fn generate_sample<R: Rng + ?Sized>(n: usize, rng: &mut R, cfg: &SimConfig) -> Result<SimSample> {
    if n == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    let centers = hexagon_centers();
    let mut units = Vec::with_capacity(n);
    let mut mu = Matrix::zeros(n, 2);
    let mut pi1 = Vec::with_capacity(n);
    let mut sectors = Vec::with_capacity(n);
    for i in 0..n {
        let x = draw_covariates(rng);
        let (m, s) = counterfactual_means(&x, cfg.delta, &centers);
        let p = treatment_propensity(&x);
        let a = if rng.random::<f64>() < p { 2 } else { 1 };
        let eps: f64 = StandardNormal.sample(rng);
        units.push(ObservedUnit {
            y: m[a - 1] + cfg.sigma * eps,
            a,
            x: x.to_vec(),
        });
        mu.row_mut(i).copy_from_slice(&m);
        pi1.push(p);
        sectors.push(s);
    }
    Ok(SimSample {
        dataset: Dataset::new(units, 2)?,
        mu,
        pi1,
        sectors,
    })
}

/// `R(C*) = E[j0² + j1²] = (5/4)·δ²`.
pub fn oracle_population_risk(delta: f64) -> f64 {
    1.25 * delta * delta
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

fn mc_summary(sum: f64, sum_sq: f64, m: usize) -> McEstimate {
    let mf = m as f64;
    let mean = sum / mf;
    let var = ((sum_sq - mf * mean * mean) / (mf - 1.0)).max(0.0);
    McEstimate {
        mean,
        se: (var / mf).sqrt(),
    }
}

/// Population risk `E‖μ − Π_C(μ)‖²` over `m` fresh draws of the design.
pub fn evaluate_population_risk<R: Rng + ?Sized>(
    c: &Codebook,
    delta: f64,
    m: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if m < MIN_EVAL_DRAWS {
        return Err(Error::Config(format!("need at least {MIN_EVAL_DRAWS} draws, got {m}")));
    }
    if c.p() != 2 {
        return Err(Error::Shape("design codebooks live in two dimensions".into()));
    }
    let centers = hexagon_centers();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..m {
        let x = draw_covariates(rng);
        let (mu, _) = counterfactual_means(&x, delta, &centers);
        let d = nearest(&mu, c).1;
        sum += d;
        sum_sq += d * d;
    }
    Ok(mc_summary(sum, sum_sq, m))
}

/// Results of one replication for one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationOutcome {
    pub excess_risk: f64,
    pub per_center_l1: f64,
    pub moment_residual: Option<f64>,
}

const TAG_DATA: u64 = 1;
const TAG_FOLDS: u64 = 2;
const TAG_FIT: u64 = 3;
const TAG_EVAL: u64 = 4;

/// Builds the scores a replication clusters: cross-fitted nuisances, or the
/// true functions when `cfg.oracle_nuisances` is set.
pub fn replication_scores(sample: &SimSample, seed: u64, cfg: &SimConfig) -> Result<CrossFitScores> {
    let n = sample.dataset.n();
    let folds = assign_folds(n, cfg.folds, rng::derive_seed(seed, &[TAG_FOLDS]))?;
    if cfg.oracle_nuisances {
        CrossFitScores::from_nuisance_values(
            &sample.dataset,
            sample.mu.clone(),
            sample.propensity_matrix(),
            folds.labels().to_vec(),
            folds.k(),
        )
    } else {
        cross_fit(&sample.dataset, &folds, &cfg.nuisance)
    }
}

/// Runs every requested estimator on one simulated data set.
///
/// Estimators share the sample, the folds, the plug-in fit (which also warm
/// starts the influence-function fit) and the evaluation draws, so their
/// metrics differ only through the estimator.
pub fn run_cell(
    n: usize,
    seed: u64,
    estimators: &[Estimator],
    cfg: &SimConfig,
) -> Vec<(Estimator, Result<ReplicationOutcome>)> {
    let prepared = (|| -> Result<(CrossFitScores, crate::kmeans::FitResult)> {
        let sample = generate_sample(n, &mut rng::stream(seed, &[TAG_DATA]), cfg)?;
        let scores = replication_scores(&sample, seed, cfg)?;
        let plug = plug_in_estimate(
            &scores.mu_hat,
            cfg.k,
            cfg.restarts,
            rng::derive_seed(seed, &[TAG_FIT]),
            &cfg.lloyd,
        )?;
        Ok((scores, plug))
    })();
    let (scores, plug) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return estimators
                .iter()
                .map(|&est| (est, Err(Error::Fit(msg.clone()))))
                .collect();
        }
    };
    let truth = hexagon_centers();
    estimators
        .iter()
        .map(|&est| {
            let outcome = (|| {
                let (codebook, residual) = match est {
                    Estimator::PlugIn => (plug.codebook.clone(), None),
                    Estimator::Semiparametric => {
                        let fit = minimize_semiparametric(&scores, &plug.codebook, &cfg.semi)?;
                        (fit.codebook, fit.moment_residual)
                    }
                };
                let mut eval_rng: StreamRng = rng::stream(seed, &[TAG_EVAL]);
                let risk = evaluate_population_risk(&codebook, cfg.delta, cfg.eval_draws, &mut eval_rng)?;
                Ok(ReplicationOutcome {
                    excess_risk: risk.mean - oracle_population_risk(cfg.delta),
                    per_center_l1: codebook_error(&codebook, &truth)?.per_center,
                    moment_residual: residual,
                })
            })();
            (est, outcome)
        })
        .collect()
}

/// One replication: simulate, cross-fit, fit `estimator`, and score the
/// codebook against the oracle.
pub fn run_replication(
    n: usize,
    seed: u64,
    estimator: Estimator,
    cfg: &SimConfig,
) -> Result<ReplicationOutcome> {
    run_cell(n, seed, &[estimator], cfg)
        .pop()
        .expect("one estimator")
        .1
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub estimator: Estimator,
    pub rep: usize,
    pub excess_risk: f64,
    pub per_center_l1: f64,
    pub moment_residual: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n: usize,
    pub estimator: Estimator,
    pub median_excess_risk: f64,
    pub median_per_center_l1: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeRow {
    pub estimator: Estimator,
    pub excess_risk_slope: f64,
    pub per_center_l1_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<SummaryRow>,
    pub slopes: Vec<SlopeRow>,
}

impl StudyResult {
    pub fn summary_for(&self, n: usize, est: Estimator) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.n == n && r.estimator == est)
    }

    pub fn slope_for(&self, est: Estimator) -> Option<&SlopeRow> {
        self.slopes.iter().find(|r| r.estimator == est)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failed).count()
    }

    pub fn raw_csv(&self) -> String {
        csv_text(
            &["n", "estimator", "rep", "excess_risk", "per_center_l1", "moment_residual", "failed"],
            self.rows.iter().map(|r| {
                vec![
                    r.n.to_string(),
                    r.estimator.name().to_string(),
                    r.rep.to_string(),
                    fmt_f64(r.excess_risk),
                    fmt_f64(r.per_center_l1),
                    r.moment_residual.map(fmt_f64).unwrap_or_default(),
                    u8::from(r.failed).to_string(),
                ]
            }),
        )
    }

    pub fn summary_csv(&self) -> String {
        csv_text(
            &[
                "n",
                "estimator",
                "median_excess_risk",
                "median_per_center_l1",
                "failed",
                "excess_risk_slope",
                "per_center_l1_slope",
            ],
            self.summary.iter().map(|r| {
                let slope = self.slope_for(r.estimator);
                vec![
                    r.n.to_string(),
                    r.estimator.name().to_string(),
                    fmt_f64(r.median_excess_risk),
                    fmt_f64(r.median_per_center_l1),
                    r.failed.to_string(),
                    slope.map(|s| fmt_f64(s.excess_risk_slope)).unwrap_or_default(),
                    slope.map(|s| fmt_f64(s.per_center_l1_slope)).unwrap_or_default(),
                ]
            }),
        )
    }
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Least-squares slope of `log(value)` on `log(n)`. NaN if fewer than two
/// positive points.
pub fn loglog_slope(ns: &[usize], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0 && v.is_finite())
        .map(|(&n, &v)| ((n as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Seed of the `(n, rep)` cell under the study's master seed.
pub fn cell_seed(master: u64, n: usize, rep: usize) -> u64 {
    rng::derive_seed(master, &[n as u64, rep as u64])
}

/// Runs every `(n, rep)` cell on a pool of `workers` threads and aggregates.
///
/// Each cell's randomness comes from [`cell_seed`], and rows are collected
/// in grid order, so the result is identical for any worker count.
pub fn run_study(cfg: &SimConfig, workers: usize) -> Result<StudyResult> {
    cfg.validate()?;
    let mut estimators = cfg.estimators.clone();
    estimators.sort();
    estimators.dedup();
    let cells: Vec<(usize, usize)> = cfg
        .ns
        .iter()
        .flat_map(|&n| (0..cfg.reps).map(move |r| (n, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Vec<(Estimator, Result<ReplicationOutcome>)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(n, rep)| run_cell(n, cell_seed(cfg.seed, n, rep), &estimators, cfg))
            .collect()
    });

    let mut rows = Vec::with_capacity(cells.len() * estimators.len());
    for &est in &estimators {
        for (&(n, rep), cell) in cells.iter().zip(&results) {
            let (_, outcome) = cell.iter().find(|(e, _)| *e == est).expect("estimator ran");
            rows.push(match outcome {
                Ok(o) => StudyRow {
                    n,
                    estimator: est,
                    rep,
                    excess_risk: o.excess_risk,
                    per_center_l1: o.per_center_l1,
                    moment_residual: o.moment_residual,
                    failed: false,
                },
                Err(_) => StudyRow {
                    n,
                    estimator: est,
                    rep,
                    excess_risk: f64::NAN,
                    per_center_l1: f64::NAN,
                    moment_residual: None,
                    failed: true,
                },
            });
        }
    }
    rows.sort_by_key(|r| (cfg.ns.iter().position(|&n| n == r.n), r.estimator, r.rep));

    let mut summary = Vec::new();
    for &n in &cfg.ns {
        for &est in &estimators {
            let cell: Vec<&StudyRow> = rows.iter().filter(|r| r.n == n && r.estimator == est).collect();
            let ok: Vec<&&StudyRow> = cell.iter().filter(|r| !r.failed).collect();
            summary.push(SummaryRow {
                n,
                estimator: est,
                median_excess_risk: median(&ok.iter().map(|r| r.excess_risk).collect::<Vec<_>>()),
                median_per_center_l1: median(&ok.iter().map(|r| r.per_center_l1).collect::<Vec<_>>()),
                failed: cell.len() - ok.len(),
            });
        }
    }
    let slopes = estimators
        .iter()
        .map(|&est| {
            let s: Vec<&SummaryRow> = summary.iter().filter(|r| r.estimator == est).collect();
            let ns: Vec<usize> = s.iter().map(|r| r.n).collect();
            SlopeRow {
                estimator: est,
                excess_risk_slope: loglog_slope(&ns, &s.iter().map(|r| r.median_excess_risk).collect::<Vec<_>>()),
                per_center_l1_slope: loglog_slope(&ns, &s.iter().map(|r| r.median_per_center_l1).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(StudyResult { rows, summary, slopes })
}

/// Independent check of `E[j0² + j1²]` by direct sampling of the jitters.
pub fn jitter_second_moment<R: Rng + ?Sized>(delta: f64, m: usize, rng: &mut R) -> McEstimate {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..m {
        let x = draw_covariates(rng);
        let (j0, j1) = jitters(&x, delta);
        let v = j0 * j0 + j1 * j1;
        sum += v;
        sum_sq += v * v;
    }
    mc_summary(sum, sum_sq, m)
}
