//! Nuisance estimation: per-arm outcome regressions, a multinomial logistic
//! propensity model, propensity clipping and the cross-fitted influence
//! function building blocks.
//!
//! For a unit `(y, a, x)` with fitted means `m` and clipped propensities `π`,
//! the uncentered influence scores for `E[μ_b]` and `E[μ_b²]` are
//!
//! ```text
//! phi1_b = 1{a=b}/π_b · (y − m_a) + m_b
//! phi2_b = 2 m_b · 1{a=b}/π_b · (y − m_a) + m_b²
//! ```

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, FoldAssignment, Parametrization};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Covariates (1-based indices) and the polynomial degree applied to each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub features: Vec<usize>,
    pub degree: usize,
}

impl FeatureSpec {
    pub fn new(features: Vec<usize>, degree: usize) -> Self {
        FeatureSpec { features, degree }
    }

    pub fn intercept_only() -> Self {
        FeatureSpec {
            features: Vec::new(),
            degree: 1,
        }
    }

    /// Number of columns in the design, intercept included.
    pub fn n_params(&self) -> usize {
        1 + self.features.len() * self.degree
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.degree == 0 && !self.features.is_empty() {
            return Err(Error::Config("basis degree must be at least 1".into()));
        }
        if let Some(&f) = self.features.iter().find(|&&f| f < 1 || f > d) {
            return Err(Error::Config(format!(
                "feature index {f} outside 1..={d}"
            )));
        }
        Ok(())
    }

    /// `[1, x_f, x_f², …, x_f^degree, …]` for each selected covariate `f`.
    pub fn expand_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        for &f in &self.features {
            let v = x[f - 1];
            let mut pow = 1.0;
            for _ in 0..self.degree {
                pow *= v;
                out.push(pow);
            }
        }
    }

    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.expand_into(x, &mut out);
        out
    }
}

/// Outcome model family used per arm.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeSpec {
    /// Least squares on a polynomial basis.
    Linear(FeatureSpec),
    /// k-nearest-neighbour average over the selected covariates. `k = None`
    /// uses `⌈m^{4/5}⌉` for `m` training units, capped at `m`.
    Knn { features: Vec<usize>, k: Option<usize> },
}

impl OutcomeSpec {
    fn validate(&self, d: usize) -> Result<()> {
        match self {
            OutcomeSpec::Linear(spec) => spec.validate(d),
            OutcomeSpec::Knn { features, k } => {
                if features.is_empty() {
                    return Err(Error::Config("knn outcome model needs features".into()));
                }
                if *k == Some(0) {
                    return Err(Error::Config("knn neighbour count must be positive".into()));
                }
                FeatureSpec::new(features.clone(), 1).validate(d)
            }
        }
    }
}

/// Linear outcome regression for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub arm: usize,
    pub coefficients: Vec<f64>,
    pub feature_spec: FeatureSpec,
    /// Ridge penalty that was added to the normal equations (0 if none).
    pub ridge: f64,
}

impl OutcomeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.feature_spec.expand(x);
        z.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }
}

const RIDGE_CONDITION_LIMIT: f64 = 1e12;

/// Ordinary least squares on units with `A = arm` and `train_mask[i]`.
///
/// When the normal-equations matrix is ill conditioned (condition estimate
/// above 1e12) and `ridge_fallback` is set, a ridge term of
/// `1e-8 · trace(XᵀX) / dim` is added; otherwise the fit is refused.
pub fn fit_outcome_regression(
    dataset: &Dataset,
    arm: usize,
    spec: &FeatureSpec,
    train_mask: &[bool],
    ridge_fallback: bool,
) -> Result<OutcomeModel> {
    spec.validate(dataset.d())?;
    let q = spec.n_params();
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    let mut count = 0usize;
    let mut z = Vec::with_capacity(q);
    for (u, _) in dataset
        .units()
        .iter()
        .zip(train_mask)
        .filter(|(u, &m)| m && u.a == arm)
    {
        spec.expand_into(&u.x, &mut z);
        for r in 0..q {
            xty[r] += z[r] * u.y;
            for c in 0..=r {
                xtx[(r, c)] += z[r] * z[c];
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateFit(format!(
            "no training units in arm {arm}"
        )));
    }
    for r in 0..q {
        for c in 0..r {
            xtx[(c, r)] = xtx[(r, c)];
        }
    }
    let short = count < q;
    if short && !ridge_fallback {
        return Err(Error::DegenerateFit(format!(
            "arm {arm}: {count} training units for {q} parameters"
        )));
    }
    let mut ridge = 0.0;
    if short || condition_estimate(&xtx) > RIDGE_CONDITION_LIMIT {
        if !ridge_fallback {
            return Err(Error::DegenerateFit(format!(
                "arm {arm}: singular design"
            )));
        }
        ridge = 1e-8 * xtx.trace() / q as f64;
        for r in 0..q {
            xtx[(r, r)] += ridge;
        }
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Fit(format!("arm {arm}: normal equations are singular")))?;
    let beta = chol.solve(&xty);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Fit(format!("arm {arm}: non-finite coefficients")));
    }
    Ok(OutcomeModel {
        arm,
        coefficients: beta.iter().copied().collect(),
        feature_spec: spec.clone(),
        ridge,
    })
}

fn condition_estimate(sym: &DMatrix<f64>) -> f64 {
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Nearest-neighbour outcome regression for one arm.
#[derive(Debug, Clone)]
pub struct KnnModel {
    pub arm: usize,
    features: Vec<usize>,
    k: usize,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
}

impl KnnModel {
    pub fn fit(
        dataset: &Dataset,
        arm: usize,
        features: &[usize],
        k: Option<usize>,
        train_mask: &[bool],
    ) -> Result<Self> {
        let (train_x, train_y): (Vec<Vec<f64>>, Vec<f64>) = dataset
            .units()
            .iter()
            .zip(train_mask)
            .filter(|(u, &m)| m && u.a == arm)
            .map(|(u, _)| (features.iter().map(|&f| u.x[f - 1]).collect(), u.y))
            .unzip();
        let m = train_y.len();
        if m == 0 {
            return Err(Error::DegenerateFit(format!(
                "no training units in arm {arm}"
            )));
        }
        let k = k
            .unwrap_or_else(|| (m as f64).powf(0.8).ceil() as usize)
            .clamp(1, m);
        Ok(KnnModel {
            arm,
            features: features.to_vec(),
            k,
            train_x,
            train_y,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let q: Vec<f64> = self.features.iter().map(|&f| x[f - 1]).collect();
        let mut d: Vec<(f64, usize)> = self
            .train_x
            .iter()
            .enumerate()
            .map(|(i, t)| (crate::matrix::sq_dist(t, &q), i))
            .collect();
        // (distance, index) ordering keeps neighbour sets deterministic under ties
        d.select_nth_unstable_by(self.k - 1, |a, b| a.partial_cmp(b).unwrap());
        d[..self.k].iter().map(|&(_, i)| self.train_y[i]).sum::<f64>() / self.k as f64
    }
}

/// A fitted outcome regression of either family.
#[derive(Debug, Clone)]
pub enum FittedOutcome {
    Linear(OutcomeModel),
    Knn(KnnModel),
}

impl FittedOutcome {
    pub fn fit(
        dataset: &Dataset,
        arm: usize,
        spec: &OutcomeSpec,
        train_mask: &[bool],
        ridge_fallback: bool,
    ) -> Result<Self> {
        match spec {
            OutcomeSpec::Linear(fs) => {
                fit_outcome_regression(dataset, arm, fs, train_mask, ridge_fallback)
                    .map(FittedOutcome::Linear)
            }
            OutcomeSpec::Knn { features, k } => {
                KnnModel::fit(dataset, arm, features, *k, train_mask).map(FittedOutcome::Knn)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedOutcome::Linear(m) => m.predict(x),
            FittedOutcome::Knn(m) => m.predict(x),
        }
    }
}

/// Multinomial logistic propensity model with arm 1 as the reference.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    /// `(p − 1) × q`; row `r` holds the log-odds coefficients of arm `r + 2`
    /// against arm 1.
    pub coefficients: Matrix,
    pub feature_spec: FeatureSpec,
    pub clip_epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the unpenalized fit diverged and a ridge penalty was used.
    pub separation_warning: bool,
    pub ridge: f64,
}

impl PropensityModel {
    pub fn p(&self) -> usize {
        self.coefficients.nrows() + 1
    }

    /// Softmax probabilities before clipping; sums to one.
    pub fn predict_raw(&self, x: &[f64]) -> Vec<f64> {
        let z = self.feature_spec.expand(x);
        softmax_with_reference(&self.coefficients, &z)
    }

    /// Probabilities clipped coordinatewise to `[ε, 1 − ε]`.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        clip_propensity(&self.predict_raw(x), self.clip_epsilon)
    }
}

fn softmax_with_reference(coef: &Matrix, z: &[f64]) -> Vec<f64> {
    let p = coef.nrows() + 1;
    let mut eta = Vec::with_capacity(p);
    eta.push(0.0);
    for r in 0..coef.nrows() {
        eta.push(coef.row(r).iter().zip(z).map(|(b, v)| b * v).sum());
    }
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|v| *v /= s);
    probs
}

const PROPENSITY_MAX_ITER: usize = 100;
const PROPENSITY_SCORE_TOL: f64 = 1e-8;
const SEPARATION_NORM: f64 = 50.0;
const SEPARATION_RIDGE: f64 = 1e-4;

/// Maximum-likelihood multinomial logistic regression by damped Newton steps.
///
/// Converges when the largest component of the mean score falls below 1e-8,
/// or stops after 100 iterations. If the coefficient norm exceeds 50 the
/// data are treated as separated and the fit is redone with a ridge penalty
/// of 1e-4, flagging `separation_warning`.
pub fn fit_propensity(
    dataset: &Dataset,
    spec: &FeatureSpec,
    train_mask: &[bool],
    clip_epsilon: f64,
) -> Result<PropensityModel> {
    spec.validate(dataset.d())?;
    if !(clip_epsilon > 0.0 && clip_epsilon < 0.5) {
        return Err(Error::Config(format!(
            "clip epsilon must lie in (0, 0.5), got {clip_epsilon}"
        )));
    }
    let p = dataset.p();
    let mut design = Vec::new();
    let mut arms = Vec::new();
    let mut seen = vec![false; p];
    for (u, _) in dataset.units().iter().zip(train_mask).filter(|(_, &m)| m) {
        design.push(spec.expand(&u.x));
        arms.push(u.a - 1);
        seen[u.a - 1] = true;
    }
    if let Some(a) = seen.iter().position(|s| !s) {
        return Err(Error::DegenerateFit(format!(
            "arm {} absent from propensity training data",
            a + 1
        )));
    }
    match newton_multinomial(&design, &arms, p, spec.n_params(), 0.0) {
        Ok(fit) if fit.norm <= SEPARATION_NORM => Ok(fit.into_model(spec, clip_epsilon, false)),
        _ => {
            let fit = newton_multinomial(&design, &arms, p, spec.n_params(), SEPARATION_RIDGE)?;
            Ok(fit.into_model(spec, clip_epsilon, true))
        }
    }
}

struct NewtonFit {
    beta: Vec<f64>,
    rows: usize,
    cols: usize,
    iterations: usize,
    converged: bool,
    norm: f64,
    ridge: f64,
}

impl NewtonFit {
    fn into_model(self, spec: &FeatureSpec, eps: f64, warn: bool) -> PropensityModel {
        PropensityModel {
            coefficients: Matrix::from_vec(self.rows, self.cols, self.beta)
                .expect("coefficient layout"),
            feature_spec: spec.clone(),
            clip_epsilon: eps,
            iterations: self.iterations,
            converged: self.converged,
            separation_warning: warn,
            ridge: self.ridge,
        }
    }
}

fn newton_multinomial(
    design: &[Vec<f64>],
    arms: &[usize],
    p: usize,
    q: usize,
    ridge: f64,
) -> Result<NewtonFit> {
    let m = design.len() as f64;
    let rows = p - 1;
    let dim = rows * q;
    let mut beta = vec![0.0; dim];

    let objective = |beta: &[f64]| -> f64 {
        let coef = Matrix::from_vec(rows, q, beta.to_vec()).unwrap();
        let ll: f64 = design
            .iter()
            .zip(arms)
            .map(|(z, &a)| softmax_with_reference(&coef, z)[a].max(1e-300).ln())
            .sum();
        ll / m - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
    };

    let mut obj = objective(&beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PROPENSITY_MAX_ITER {
        let coef = Matrix::from_vec(rows, q, beta.clone()).unwrap();
        let mut grad = DVector::<f64>::zeros(dim);
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        for (z, &a) in design.iter().zip(arms) {
            let pr = softmax_with_reference(&coef, z);
            for r in 0..rows {
                let arm = r + 1;
                let resid = f64::from(u8::from(a == arm)) - pr[arm];
                for j in 0..q {
                    grad[r * q + j] += resid * z[j];
                }
                for s in 0..=r {
                    let w = if r == s {
                        pr[arm] * (1.0 - pr[arm])
                    } else {
                        -pr[arm] * pr[s + 1]
                    };
                    for j in 0..q {
                        for l in 0..q {
                            info[(r * q + j, s * q + l)] += w * z[j] * z[l];
                        }
                    }
                }
            }
        }
        grad /= m;
        info /= m;
        for i in 0..dim {
            grad[i] -= ridge * beta[i];
            info[(i, i)] += ridge;
            for k in 0..i {
                info[(k, i)] = info[(i, k)];
            }
        }
        if grad.amax() < PROPENSITY_SCORE_TOL {
            converged = true;
            break;
        }
        let Some(chol) = info.cholesky() else {
            return Err(Error::Fit("propensity information matrix is singular".into()));
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_obj = objective(&cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-15 * obj.abs() {
                beta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no ascent direction left at floating-point resolution
            converged = grad.amax() < 1e-6;
            break;
        }
        if beta.iter().map(|b| b * b).sum::<f64>().sqrt() > SEPARATION_NORM && ridge == 0.0 {
            break;
        }
    }
    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Fit("propensity coefficients diverged".into()));
    }
    Ok(NewtonFit {
        beta,
        rows,
        cols: q,
        iterations,
        converged,
        norm,
        ridge,
    })
}

/// Clamps each coordinate to `[eps, 1 − eps]` without renormalizing.
pub fn clip_propensity(pi_row: &[f64], eps: f64) -> Vec<f64> {
    pi_row.iter().map(|&v| v.clamp(eps, 1.0 - eps)).collect()
}

/// Full nuisance configuration for cross-fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSpec {
    pub outcome: OutcomeSpec,
    pub propensity: FeatureSpec,
    pub clip_epsilon: f64,
    pub ridge_fallback: bool,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec {
            outcome: OutcomeSpec::Linear(FeatureSpec::new(vec![1, 2], 1)),
            propensity: FeatureSpec::new(vec![1, 2, 3], 1),
            clip_epsilon: 0.01,
            ridge_fallback: true,
        }
    }
}

/// Influence scores `(phi1, phi2)` for one unit.
///
/// `arm` is 1-based; `pi_row` should already be clipped.
pub fn influence_scores(y: f64, arm: usize, mu_row: &[f64], pi_row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = arm - 1;
    let ipw = (y - mu_row[a]) / pi_row[a];
    let mut phi1 = mu_row.to_vec();
    let mut phi2: Vec<f64> = mu_row.iter().map(|m| m * m).collect();
    phi1[a] += ipw;
    phi2[a] += 2.0 * mu_row[a] * ipw;
    (phi1, phi2)
}

/// Per-unit cross-fitted nuisance values and influence scores.
#[derive(Debug, Clone)]
pub struct CrossFitScores {
    pub mu_hat: Matrix,
    pub pi_hat: Matrix,
    pub phi1: Matrix,
    pub phi2: Matrix,
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub parametrization: Parametrization,
}

impl CrossFitScores {
    /// Assembles scores from already evaluated nuisance values, e.g. the true
    /// regression and propensity functions in a simulation.
    pub fn from_nuisance_values(
        dataset: &Dataset,
        mu_hat: Matrix,
        pi_hat: Matrix,
        fold_of: Vec<usize>,
        k: usize,
    ) -> Result<Self> {
        let (n, p) = (dataset.n(), dataset.p());
        if mu_hat.nrows() != n || mu_hat.ncols() != p || pi_hat.nrows() != n || pi_hat.ncols() != p
        {
            return Err(Error::Shape(format!(
                "nuisance matrices must be {n}x{p}"
            )));
        }
        if fold_of.len() != n {
            return Err(Error::Shape("fold vector length differs from n".into()));
        }
        let mut phi1 = Matrix::zeros(n, p);
        let mut phi2 = Matrix::zeros(n, p);
        for (i, u) in dataset.units().iter().enumerate() {
            let (f1, f2) = influence_scores(u.y, u.a, mu_hat.row(i), pi_hat.row(i));
            phi1.row_mut(i).copy_from_slice(&f1);
            phi2.row_mut(i).copy_from_slice(&f2);
        }
        Ok(CrossFitScores {
            mu_hat,
            pi_hat,
            phi1,
            phi2,
            fold_of,
            k,
            parametrization: Parametrization::Levels,
        })
    }

    pub fn n(&self) -> usize {
        self.mu_hat.nrows()
    }

    pub fn p(&self) -> usize {
        self.mu_hat.ncols()
    }

    /// Re-expresses the scores in another parametrization of the
    /// counterfactual-mean vector.
    ///
    /// The map is linear, so `mu_hat` and `phi1` transform directly; the
    /// second-moment scores are rebuilt from the transformed means and the
    /// transformed weighted residuals `phi1 − mu_hat`.
    pub fn reparametrize(&self, mode: Parametrization) -> Result<CrossFitScores> {
        use Parametrization::*;
        let forward = match (self.parametrization, mode) {
            (a, b) if a == b && a == Levels => return Ok(self.clone()),
            (Levels, ContrastsVsBaseline) => true,
            (ContrastsVsBaseline, Levels) => false,
            _ => {
                return Err(Error::State(
                    "scores are already in contrasts parametrization".into(),
                ))
            }
        };
        let transform = |row: &mut [f64]| {
            let base = row[0];
            for v in &mut row[1..] {
                if forward {
                    *v -= base;
                } else {
                    *v += base;
                }
            }
        };
        let mut out = self.clone();
        for i in 0..self.n() {
            let mut resid: Vec<f64> = self
                .phi1
                .row(i)
                .iter()
                .zip(self.mu_hat.row(i))
                .map(|(f, m)| f - m)
                .collect();
            transform(&mut resid);
            transform(out.mu_hat.row_mut(i));
            transform(out.phi1.row_mut(i));
            let mu = out.mu_hat.row(i).to_vec();
            for (b, v) in out.phi2.row_mut(i).iter_mut().enumerate() {
                *v = 2.0 * mu[b] * resid[b] + mu[b] * mu[b];
            }
        }
        out.parametrization = mode;
        Ok(out)
    }
}

/// Cross-fits all nuisances: for each fold, models are trained on the other
/// folds and evaluated on the fold's own units.
pub fn cross_fit(
    dataset: &Dataset,
    folds: &FoldAssignment,
    spec: &NuisanceSpec,
) -> Result<CrossFitScores> {
    let (n, p) = (dataset.n(), dataset.p());
    if folds.labels().len() != n {
        return Err(Error::Shape(format!(
            "fold assignment covers {} units, dataset has {n}",
            folds.labels().len()
        )));
    }
    spec.outcome.validate(dataset.d())?;
    spec.propensity.validate(dataset.d())?;
    let mut mu_hat = Matrix::zeros(n, p);
    let mut pi_hat = Matrix::zeros(n, p);
    for b in 1..=folds.k() {
        let wrap = |e: Error| Error::Fold {
            fold: b,
            source: Box::new(e),
        };
        let mask: Vec<bool> = folds.labels().iter().map(|&l| l != b).collect();
        let outcome: Vec<FittedOutcome> = (1..=p)
            .map(|arm| FittedOutcome::fit(dataset, arm, &spec.outcome, &mask, spec.ridge_fallback))
            .collect::<Result<_>>()
            .map_err(wrap)?;
        let prop = fit_propensity(dataset, &spec.propensity, &mask, spec.clip_epsilon)
            .map_err(wrap)?;
        for i in folds.members(b) {
            let x = &dataset.units()[i].x;
            for (a, m) in outcome.iter().enumerate() {
                mu_hat.set(i, a, m.predict(x));
            }
            pi_hat.row_mut(i).copy_from_slice(&prop.predict(x));
        }
    }
    CrossFitScores::from_nuisance_values(dataset, mu_hat, pi_hat, folds.labels().to_vec(), folds.k())
}
