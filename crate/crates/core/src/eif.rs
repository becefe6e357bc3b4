//! Influence-function clustering risk and its minimizers.
//!
//! For a codebook `C` the per-unit score is
//!
//! ```text
//! phi_C = Σ_a ( phi2_a − 2·phi1_a·c_a + c_a² ),   c = Π_C(mu_hat)
//! ```
//!
//! and the cross-fitted risk estimate is its sample mean. Assignments always
//! use the fitted mean rows; center updates use the first-order scores.

use crate::error::{Error, Result};
use crate::kmeans::{assign, reseed_empty, Codebook, FitResult};
use crate::matrix::{sq_dist, Matrix};
use crate::nuisance::CrossFitScores;

/// Score of a single unit at codebook `c`.
pub fn phi_c_score(phi1: &[f64], phi2: &[f64], mu_hat: &[f64], c: &Codebook) -> f64 {
    let (_, center) = crate::kmeans::project(mu_hat, c);
    score_at(phi1, phi2, center)
}

#[inline]
fn score_at(phi1: &[f64], phi2: &[f64], center: &[f64]) -> f64 {
    phi1.iter()
        .zip(phi2)
        .zip(center)
        .map(|((f1, f2), c)| f2 - 2.0 * f1 * c + c * c)
        .sum()
}

/// Per-unit scores at `c`.
pub fn phi_c_scores(scores: &CrossFitScores, c: &Codebook) -> Vec<f64> {
    (0..scores.n())
        .map(|i| phi_c_score(scores.phi1.row(i), scores.phi2.row(i), scores.mu_hat.row(i), c))
        .collect()
}

/// Cross-fitted risk estimate. Fold-weighted fold means collapse to the
/// grand mean, so this is the plain average of the unit scores. It can be
/// negative; no flooring is applied.
pub fn risk_hat(scores: &CrossFitScores, c: &Codebook) -> f64 {
    let n = scores.n();
    (0..n)
        .map(|i| phi_c_score(scores.phi1.row(i), scores.phi2.row(i), scores.mu_hat.row(i), c))
        .sum::<f64>()
        / n as f64
}

/// Sample variance (n − 1 denominator) of the unit scores at `c`.
pub fn phi_c_variance(scores: &CrossFitScores, c: &Codebook) -> f64 {
    let v = phi_c_scores(scores, c);
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
}

/// Gradient of [`risk_hat`] with respect to the centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBlock {
    /// Row `j` is `(2/n) Σ_{i in cell j} (c_j − phi1_i)`.
    pub blocks: Matrix,
    pub active_counts: Vec<usize>,
}

impl GradientBlock {
    pub fn max_abs(&self) -> f64 {
        self.blocks.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn gradient(scores: &CrossFitScores, c: &Codebook) -> GradientBlock {
    let (labels, _) = assign(&scores.mu_hat, c);
    gradient_with_labels(scores, c, &labels)
}

fn gradient_with_labels(scores: &CrossFitScores, c: &Codebook, labels: &[usize]) -> GradientBlock {
    let (k, p, n) = (c.k(), c.p(), scores.n());
    let mut blocks = Matrix::zeros(k, p);
    let mut active_counts = vec![0usize; k];
    for (i, &j) in labels.iter().enumerate() {
        active_counts[j] += 1;
        let center = c.center(j);
        for ((g, f), cv) in blocks.row_mut(j).iter_mut().zip(scores.phi1.row(i)).zip(center) {
            *g += cv - f;
        }
    }
    let scale = 2.0 / n as f64;
    for j in 0..k {
        blocks.row_mut(j).iter_mut().for_each(|g| *g *= scale);
    }
    GradientBlock {
        blocks,
        active_counts,
    }
}

/// Cell proportions and the block-diagonal derivative matrix they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeMatrix {
    pub proportions: Vec<f64>,
    /// Diagonal of `2·diag(1_p p_1, …, 1_p p_k)`, length `k·p`.
    pub diagonal: Vec<f64>,
    /// True when some cell is empty, making the matrix singular.
    pub singular: bool,
}

pub fn derivative_matrix(mu_hat: &Matrix, c: &Codebook) -> DerivativeMatrix {
    let (labels, _) = assign(mu_hat, c);
    let n = mu_hat.nrows() as f64;
    let mut counts = vec![0usize; c.k()];
    for &j in &labels {
        counts[j] += 1;
    }
    let proportions: Vec<f64> = counts.iter().map(|&m| m as f64 / n).collect();
    let diagonal = proportions
        .iter()
        .flat_map(|&pj| std::iter::repeat_n(2.0 * pj, c.p()))
        .collect();
    DerivativeMatrix {
        singular: counts.contains(&0),
        proportions,
        diagonal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SemiMethod {
    GradientDescent,
    #[default]
    GeneralizedLloyd,
    Newton,
}

impl std::str::FromStr for SemiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient_descent" => Ok(SemiMethod::GradientDescent),
            "generalized_lloyd" => Ok(SemiMethod::GeneralizedLloyd),
            "newton" => Ok(SemiMethod::Newton),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiOptions {
    pub method: SemiMethod,
    /// Gradient sup-norm declaring the moment condition met.
    pub tol: f64,
    /// `None` picks 100 rounds for the block methods and 500 steps for
    /// gradient descent.
    pub max_iter: Option<usize>,
    /// Initial gradient step as a fraction of the bounding-box diagonal of
    /// the fitted mean rows.
    pub step_scale: f64,
    pub backtrack: f64,
    pub keep_history: bool,
}

impl Default for SemiOptions {
    fn default() -> Self {
        SemiOptions {
            method: SemiMethod::GeneralizedLloyd,
            tol: 1e-8,
            max_iter: None,
            step_scale: 0.1,
            backtrack: 0.5,
            keep_history: false,
        }
    }
}

/// Minimizes [`risk_hat`] starting from `init`.
///
/// The objective is piecewise quadratic and not guaranteed to decrease along
/// block updates, so every iterate is scored and the best one is returned.
/// `converged` is set only when the returned codebook satisfies the moment
/// condition `‖gradient‖∞ < tol`.
pub fn minimize_semiparametric(
    scores: &CrossFitScores,
    init: &Codebook,
    opts: &SemiOptions,
) -> Result<FitResult> {
    if scores.n() == 0 {
        return Err(Error::Optimization("no units to score".into()));
    }
    if init.p() != scores.p() {
        return Err(Error::Shape(format!(
            "codebook dimension {} differs from score dimension {}",
            init.p(),
            scores.p()
        )));
    }
    let mut run = Run::new(scores, init, opts);
    match opts.method {
        SemiMethod::GeneralizedLloyd => run.block_updates(true, opts.max_iter.unwrap_or(100)),
        SemiMethod::Newton => run.block_updates(false, opts.max_iter.unwrap_or(100)),
        SemiMethod::GradientDescent => run.gradient_descent(opts.max_iter.unwrap_or(500)),
    }
    Ok(run.finish())
}

struct Run<'a> {
    scores: &'a CrossFitScores,
    opts: &'a SemiOptions,
    current: Codebook,
    labels: Vec<usize>,
    dists: Vec<f64>,
    risk: f64,
    best: (f64, Codebook, usize),
    trace: Vec<f64>,
    history: Vec<Codebook>,
    iterations: usize,
}

impl<'a> Run<'a> {
    fn new(scores: &'a CrossFitScores, init: &Codebook, opts: &'a SemiOptions) -> Self {
        let (labels, dists) = assign(&scores.mu_hat, init);
        let risk = risk_hat(scores, init);
        Run {
            scores,
            opts,
            current: init.clone(),
            labels,
            dists,
            risk,
            best: (risk, init.clone(), 0),
            trace: vec![risk],
            history: if opts.keep_history { vec![init.clone()] } else { Vec::new() },
            iterations: 0,
        }
    }

    fn accept(&mut self, next: Codebook) {
        let (labels, dists) = assign(&self.scores.mu_hat, &next);
        self.risk = risk_hat(self.scores, &next);
        self.iterations += 1;
        self.trace.push(self.risk);
        if self.opts.keep_history {
            self.history.push(next.clone());
        }
        if self.risk < self.best.0 {
            self.best = (self.risk, next.clone(), self.iterations);
        }
        self.current = next;
        self.labels = labels;
        self.dists = dists;
    }

    /// Cell means of the first-order scores. Empty cells are reseeded to the
    /// farthest fitted mean row (`reseed`) or left in place (Newton step).
    fn block_updates(&mut self, reseed: bool, max_rounds: usize) {
        let (k, p) = (self.current.k(), self.current.p());
        for _ in 0..max_rounds {
            let mut sums = Matrix::zeros(k, p);
            let mut counts = vec![0usize; k];
            for (i, &j) in self.labels.iter().enumerate() {
                counts[j] += 1;
                for (s, v) in sums.row_mut(j).iter_mut().zip(self.scores.phi1.row(i)) {
                    *s += v;
                }
            }
            let mut next = self.current.clone();
            for j in (0..k).filter(|&j| counts[j] > 0) {
                let m = counts[j] as f64;
                for (dst, s) in next.center_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s / m;
                }
            }
            if reseed {
                reseed_empty(&self.scores.mu_hat, &self.dists, &counts, &mut next);
            }
            if next == self.current {
                break;
            }
            let before = std::mem::take(&mut self.labels);
            self.accept(next);
            if before == self.labels {
                // labels repeat: the current centers are the exact block minimizer
                break;
            }
        }
    }

    fn gradient_descent(&mut self, max_steps: usize) {
        let mu = &self.scores.mu_hat;
        let p = mu.ncols();
        let (mut lo, mut hi) = (vec![f64::INFINITY; p], vec![f64::NEG_INFINITY; p]);
        for row in mu.rows_iter() {
            for a in 0..p {
                lo[a] = lo[a].min(row[a]);
                hi[a] = hi[a].max(row[a]);
            }
        }
        let diameter = sq_dist(&lo, &hi).sqrt().max(f64::EPSILON);
        let initial_step = self.opts.step_scale * diameter;
        let mut step = initial_step;
        for _ in 0..max_steps {
            let g = gradient_with_labels(self.scores, &self.current, &self.labels);
            if g.max_abs() < self.opts.tol {
                break;
            }
            let mut moved = false;
            for _ in 0..60 {
                let mut cand = self.current.clone();
                for j in 0..cand.k() {
                    for (c, gv) in cand.center_mut(j).iter_mut().zip(g.blocks.row(j)) {
                        *c -= step * gv;
                    }
                }
                if risk_hat(self.scores, &cand) <= self.risk {
                    self.accept(cand);
                    moved = true;
                    break;
                }
                step *= self.opts.backtrack;
            }
            if !moved {
                break;
            }
            step = (step / self.opts.backtrack).min(initial_step);
        }
    }

    fn finish(self) -> FitResult {
        let (risk, codebook, _) = self.best;
        let (labels, _) = assign(&self.scores.mu_hat, &codebook);
        let residual = gradient_with_labels(self.scores, &codebook, &labels).max_abs();
        FitResult {
            degenerate: codebook.has_duplicate_centers(),
            converged: residual < self.opts.tol,
            codebook,
            assignments: labels,
            risk,
            iterations: self.iterations,
            restarts_used: 1,
            risk_trace: self.trace,
            history: self.history,
            moment_residual: Some(residual),
        }
    }
}
