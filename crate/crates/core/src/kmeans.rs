//! k-means machinery in the counterfactual-mean space.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{csv_text, fmt_f64};
use crate::matrix::{sq_dist, Matrix};
use crate::rng;

/// `k` centers in `p` dimensions, stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Matrix,
}

impl Codebook {
    pub fn new(centers: Matrix) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::Shape("codebook needs at least one center".into()));
        }
        if !centers.is_finite() {
            return Err(Error::Data("codebook has non-finite centers".into()));
        }
        Ok(Codebook { centers })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Codebook::new(Matrix::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn p(&self) -> usize {
        self.centers.ncols()
    }

    pub fn center(&self, j: usize) -> &[f64] {
        self.centers.row(j)
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub(crate) fn center_mut(&mut self, j: usize) -> &mut [f64] {
        self.centers.row_mut(j)
    }

    pub fn has_duplicate_centers(&self) -> bool {
        let mut seen = HashSet::new();
        (0..self.k()).any(|j| !seen.insert(bits(self.center(j))))
    }

    /// `cluster,c1,…,cp` with 1-based cluster labels.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["cluster".to_string()];
        header.extend((1..=self.p()).map(|a| format!("c{a}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        csv_text(
            &header,
            (0..self.k()).map(|j| {
                std::iter::once((j + 1).to_string())
                    .chain(self.center(j).iter().map(|&v| fmt_f64(v)))
                    .collect::<Vec<_>>()
            }),
        )
    }

    /// Parses the format written by [`Codebook::to_csv`].
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("centers row {}: {e}", i + 1)))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>().map_err(|_| {
                        Error::Data(format!("non-numeric center value `{c}` at row {}", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("centers file has no rows".into()));
        }
        Codebook::from_rows(&rows).map_err(|e| Error::Data(e.to_string()))
    }
}

fn bits(row: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 compare equal as centers
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Nearest center of `x` (0-based index, lowest index on ties) and its
/// squared distance.
pub fn nearest(x: &[f64], c: &Codebook) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..c.k() {
        let d = sq_dist(x, c.center(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Projection of `x` onto the codebook: index and center.
pub fn project<'a>(x: &[f64], c: &'a Codebook) -> (usize, &'a [f64]) {
    let (j, _) = nearest(x, c);
    (j, c.center(j))
}

/// Mean squared distance from each row to its nearest center.
pub fn empirical_risk(points: &Matrix, c: &Codebook) -> f64 {
    let n = points.nrows();
    points.rows_iter().map(|x| nearest(x, c).1).sum::<f64>() / n as f64
}

pub(crate) fn assign(points: &Matrix, c: &Codebook) -> (Vec<usize>, Vec<f64>) {
    points.rows_iter().map(|x| nearest(x, c)).unzip()
}

fn distinct_rows(points: &Matrix) -> usize {
    points.rows_iter().map(bits).collect::<HashSet<_>>().len()
}

/// D²-weighted sequential seeding; every center is a data row.
pub fn kmeanspp_init<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Result<Codebook> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Init("k must be at least 1".into()));
    }
    if distinct_rows(points) < k {
        return Err(Error::Init(format!(
            "need {k} distinct points, found {}",
            distinct_rows(points)
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = points
        .rows_iter()
        .map(|x| sq_dist(x, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("distinct rows leave positive mass");
        chosen.push(pick);
        for (i, x) in points.rows_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, points.row(pick)));
        }
    }
    Codebook::new(points.select_rows(&chosen))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LloydOptions {
    /// Stop once the risk decrease falls below `tol` times the current risk.
    pub tol: f64,
    pub max_iter: usize,
    /// Record every iterate codebook in [`FitResult::history`].
    pub keep_history: bool,
}

impl Default for LloydOptions {
    fn default() -> Self {
        LloydOptions {
            tol: 1e-10,
            max_iter: 300,
            keep_history: false,
        }
    }
}

/// Outcome of a codebook fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub codebook: Codebook,
    /// 0-based nearest-center labels of the points the fit was scored on.
    pub assignments: Vec<usize>,
    pub risk: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts_used: usize,
    /// Set when duplicate centers survived the repair pass.
    pub degenerate: bool,
    /// Objective value at each iterate, starting with the initial codebook.
    pub risk_trace: Vec<f64>,
    pub history: Vec<Codebook>,
    /// Largest absolute gradient component at the returned codebook (only
    /// for the influence-function objective).
    pub moment_residual: Option<f64>,
}

impl FitResult {
    /// `unit,cluster` with 1-based labels.
    pub fn assignments_csv(&self) -> String {
        csv_text(
            &["unit", "cluster"],
            self.assignments
                .iter()
                .enumerate()
                .map(|(i, &j)| vec![(i + 1).to_string(), (j + 1).to_string()]),
        )
    }

    /// Iterate-by-iterate objective values.
    pub fn risk_trace_csv(&self) -> String {
        csv_text(
            &["iteration", "risk"],
            self.risk_trace
                .iter()
                .enumerate()
                .map(|(i, &r)| vec![i.to_string(), fmt_f64(r)]),
        )
    }
}

/// Mean of the rows assigned to each cell; empty cells are reseeded to the
/// points farthest from their current centers, one distinct point per cell.
pub(crate) fn update_means(
    points: &Matrix,
    labels: &[usize],
    dists: &[f64],
    current: &Codebook,
) -> Codebook {
    let (k, p) = (current.k(), current.p());
    let mut sums = Matrix::zeros(k, p);
    let mut counts = vec![0usize; k];
    for (x, &j) in points.rows_iter().zip(labels) {
        counts[j] += 1;
        for (s, v) in sums.row_mut(j).iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut next = current.clone();
    for j in 0..k {
        if counts[j] > 0 {
            let c = counts[j] as f64;
            for (dst, s) in next.center_mut(j).iter_mut().zip(sums.row(j)) {
                *dst = s / c;
            }
        }
    }
    reseed_empty(points, dists, &counts, &mut next);
    next
}

pub(crate) fn reseed_empty(points: &Matrix, dists: &[f64], counts: &[usize], cb: &mut Codebook) {
    if counts.iter().all(|&c| c > 0) {
        return;
    }
    let mut d = dists.to_vec();
    for j in (0..cb.k()).filter(|&j| counts[j] == 0) {
        let far = farthest(&d);
        cb.center_mut(j).copy_from_slice(points.row(far));
        d[far] = -1.0;
    }
}

fn farthest(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}

/// Moves one of each group of coincident centers to the point farthest from
/// its center. Returns whether anything moved.
pub(crate) fn repair_duplicates(points: &Matrix, dists: &[f64], cb: &mut Codebook) -> bool {
    let mut seen = HashSet::new();
    let mut d = dists.to_vec();
    let mut moved = false;
    for j in 0..cb.k() {
        if !seen.insert(bits(cb.center(j))) {
            let far = farthest(&d);
            cb.center_mut(j).copy_from_slice(points.row(far));
            d[far] = -1.0;
            moved = true;
        }
    }
    moved
}

/// Lloyd iteration from `init`.
///
/// Alternates nearest-center assignment and mean updates; the risk is
/// nonincreasing. Stops when the relative decrease drops below `opts.tol` or
/// after `opts.max_iter` updates. If the final codebook contains coincident
/// centers it gets one repair pass; duplicates that survive set `degenerate`.
pub fn lloyd(points: &Matrix, init: &Codebook, opts: &LloydOptions) -> FitResult {
    let mut centers = init.clone();
    let (mut labels, mut dists) = assign(points, &centers);
    let n = points.nrows() as f64;
    let mut risk = dists.iter().sum::<f64>() / n;
    let mut trace = vec![risk];
    let mut history = if opts.keep_history { vec![centers.clone()] } else { Vec::new() };
    let mut iterations = 0;
    let mut budget = opts.max_iter;
    let mut converged = false;
    let mut repaired = false;

    loop {
        while iterations < budget {
            let next = update_means(points, &labels, &dists, &centers);
            iterations += 1;
            if next == centers {
                converged = true;
                break;
            }
            let (nl, nd) = assign(points, &next);
            let next_risk = nd.iter().sum::<f64>() / n;
            let decrease = risk - next_risk;
            if next_risk <= risk {
                centers = next;
                labels = nl;
                dists = nd;
                risk = next_risk;
                trace.push(risk);
                if opts.keep_history {
                    history.push(centers.clone());
                }
            }
            if decrease <= opts.tol * risk {
                converged = true;
                break;
            }
        }
        if repaired || !centers.has_duplicate_centers() {
            break;
        }
        repaired = true;
        let mut fixed = centers.clone();
        repair_duplicates(points, &dists, &mut fixed);
        let (nl, nd) = assign(points, &fixed);
        let fixed_risk = nd.iter().sum::<f64>() / n;
        if fixed_risk > risk {
            break;
        }
        centers = fixed;
        labels = nl;
        dists = nd;
        risk = fixed_risk;
        converged = false;
        budget = iterations + opts.max_iter;
    }

    FitResult {
        degenerate: centers.has_duplicate_centers(),
        codebook: centers,
        assignments: labels,
        risk,
        iterations,
        converged,
        restarts_used: 1,
        risk_trace: trace,
        history,
        moment_residual: None,
    }
}

/// Plug-in codebook: best of `restarts` k-means++ + Lloyd runs.
///
/// Restart `r` draws its seeding from the stream `(seed, r)`, so the result
/// does not depend on the order in which restarts are evaluated.
pub fn plug_in_estimate(
    points: &Matrix,
    k: usize,
    restarts: usize,
    seed: u64,
    opts: &LloydOptions,
) -> Result<FitResult> {
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    if points.nrows() == 0 {
        return Err(Error::Data("no points to cluster".into()));
    }
    let mut best: Option<FitResult> = None;
    for r in 0..restarts {
        let mut rng = rng::stream(seed, &[r as u64]);
        let init = kmeanspp_init(points, k, &mut rng)?;
        let fit = lloyd(points, &init, opts);
        if best.as_ref().is_none_or(|b| fit.risk < b.risk) {
            best = Some(fit);
        }
    }
    let mut best = best.expect("at least one restart");
    best.restarts_used = restarts;
    Ok(best)
}

/// Plug-in codebook warm-started from a given codebook in addition to
/// `restarts` fresh k-means++ runs.
pub fn plug_in_with_warm_start(
    points: &Matrix,
    warm: &Codebook,
    restarts: usize,
    seed: u64,
    opts: &LloydOptions,
) -> Result<FitResult> {
    let warm_fit = lloyd(points, warm, opts);
    if restarts == 0 {
        return Ok(warm_fit);
    }
    let fresh = plug_in_estimate(points, warm.k(), restarts, seed, opts)?;
    Ok(if warm_fit.risk <= fresh.risk { warm_fit } else { fresh })
}

const BRUTE_FORCE_MAX_N: usize = 12;
const BRUTE_FORCE_MAX_K: usize = 3;

/// Globally optimal codebook by enumerating every partition of the points
/// into at most `k` groups. Refuses inputs beyond `n ≤ 12`, `k ≤ 3`.
pub fn brute_force_codebook(points: &Matrix, k: usize) -> Result<Codebook> {
    let n = points.nrows();
    if n == 0 || k == 0 {
        return Err(Error::Refused("need at least one point and one center".into()));
    }
    if n > BRUTE_FORCE_MAX_N || k > BRUTE_FORCE_MAX_K {
        return Err(Error::Refused(format!(
            "enumeration limited to n <= {BRUTE_FORCE_MAX_N} and k <= {BRUTE_FORCE_MAX_K}, got n={n}, k={k}"
        )));
    }
    let p = points.ncols();
    // restricted growth strings: label[0] = 0, label[i] <= max(label[..i]) + 1
    let mut labels = vec![0usize; n];
    let mut best: Option<(f64, Matrix, usize)> = None;
    loop {
        let groups = labels.iter().max().unwrap() + 1;
        let mut sums = Matrix::zeros(groups, p);
        let mut counts = vec![0usize; groups];
        for (x, &g) in points.rows_iter().zip(&labels) {
            counts[g] += 1;
            for (s, v) in sums.row_mut(g).iter_mut().zip(x) {
                *s += v;
            }
        }
        for g in 0..groups {
            let c = counts[g] as f64;
            sums.row_mut(g).iter_mut().for_each(|s| *s /= c);
        }
        let sse: f64 = points
            .rows_iter()
            .zip(&labels)
            .map(|(x, &g)| sq_dist(x, sums.row(g)))
            .sum();
        if best.as_ref().is_none_or(|b| sse < b.0) {
            best = Some((sse, sums, groups));
        }
        if !next_rgs(&mut labels, k) {
            break;
        }
    }
    let (_, means, groups) = best.unwrap();
    let mut rows: Vec<Vec<f64>> = means.rows_iter().map(<[f64]>::to_vec).collect();
    // fewer groups than k only happens with repeated points; pad with data rows
    let mut i = 0;
    while rows.len() < k && groups < k && i < n {
        let x = points.row(i).to_vec();
        if !rows.contains(&x) {
            rows.push(x);
        }
        i += 1;
    }
    while rows.len() < k {
        rows.push(rows[0].clone());
    }
    Codebook::from_rows(&rows)
}

fn next_rgs(labels: &mut [usize], k: usize) -> bool {
    let n = labels.len();
    for i in (1..n).rev() {
        let max_prefix = labels[..i].iter().copied().max().unwrap();
        if labels[i] <= max_prefix && labels[i] + 1 < k {
            labels[i] += 1;
            labels[i + 1..].iter_mut().for_each(|l| *l = 0);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn project_examples() {
        let c = Codebook::from_rows(&[[0.0, 0.0], [1.0, 3.0]]).unwrap();
        assert_eq!(project(&[0.0, 0.0], &c), (0, &[0.0, 0.0][..]));
        assert_eq!(project(&[1.0, 3.0], &c), (1, &[1.0, 3.0][..]));
        let c = Codebook::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(project(&[0.5], &c).0, 0);
    }

    #[test]
    fn risk_examples() {
        let pts = col(&[0.0, 1.0, 10.0]);
        let c = Codebook::from_rows(&[[0.5], [10.0]]).unwrap();
        assert_abs_diff_eq!(empirical_risk(&pts, &c), 1.0 / 6.0, epsilon = 1e-15);
        let c = Codebook::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
        assert_eq!(empirical_risk(&pts, &c), 0.0);
        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Codebook::from_rows(&[[4.0, -2.0]]).unwrap();
        assert_eq!(empirical_risk(&one, &c), 25.0);
    }

    #[test]
    fn lloyd_hand_trace() {
        let pts = col(&[0.0, 1.0, 10.0]);
        let init = Codebook::from_rows(&[[0.0], [10.0]]).unwrap();
        let fit = lloyd(&pts, &init, &LloydOptions::default());
        assert_eq!(fit.codebook, Codebook::from_rows(&[[0.5], [10.0]]).unwrap());
        assert_abs_diff_eq!(fit.risk, 1.0 / 6.0, epsilon = 1e-15);
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn lloyd_fixed_point_and_single_cluster() {
        let pts = Matrix::from_rows(&[[-1.0, 0.0], [-3.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
        let opt = Codebook::from_rows(&[[-2.0, 0.0], [2.0, 0.0]]).unwrap();
        let fit = lloyd(&pts, &opt, &LloydOptions::default());
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        assert_eq!(fit.codebook, opt);

        let init = Codebook::from_rows(&[[7.0, 7.0]]).unwrap();
        let fit = lloyd(&pts, &init, &LloydOptions { max_iter: 1, ..Default::default() });
        assert_eq!(fit.codebook.center(0), &[0.0, 0.0]);
    }

    #[test]
    fn empty_cell_is_reseeded() {
        let pts = col(&[0.0, 1.0, 2.0, 50.0]);
        let init = Codebook::from_rows(&[[1.0], [1000.0]]).unwrap();
        let fit = lloyd(&pts, &init, &LloydOptions::default());
        assert!(fit.risk_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_abs_diff_eq!(fit.risk, 0.5, epsilon = 1e-12);
        assert!(!fit.degenerate);
    }

    #[test]
    fn kmeanspp_degenerate_and_exact_cases() {
        let mut rng = rng::rng_from_seed(1);
        let same = Matrix::from_rows(&[[2.0, 2.0]; 4]).unwrap();
        let c = kmeanspp_init(&same, 1, &mut rng).unwrap();
        assert_eq!(c.center(0), &[2.0, 2.0]);
        assert!(matches!(kmeanspp_init(&same, 2, &mut rng), Err(Error::Init(_))));

        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [5.0, 5.0]]).unwrap();
        for s in 0..20 {
            let c = kmeanspp_init(&pts, 3, &mut rng::rng_from_seed(s)).unwrap();
            let mut rows: Vec<Vec<f64>> = (0..3).map(|j| c.center(j).to_vec()).collect();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(rows, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0]]);
        }
    }

    #[test]
    fn kmeanspp_separated_blobs() {
        let mut rows = Vec::new();
        for i in 0..10 {
            let e = i as f64 * 0.01;
            rows.push([e, -e]);
            rows.push([100.0 + e, 100.0 - e]);
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        for s in 0..100 {
            let c = kmeanspp_init(&pts, 2, &mut rng::rng_from_seed(s)).unwrap();
            let sides: Vec<bool> = (0..2).map(|j| c.center(j)[0] > 50.0).collect();
            assert_ne!(sides[0], sides[1], "seed {s}");
        }
    }

    #[test]
    fn brute_force_examples() {
        let pts = col(&[0.0, 1.0, 10.0]);
        let c = brute_force_codebook(&pts, 2).unwrap();
        let mut v: Vec<f64> = (0..2).map(|j| c.center(j)[0]).collect();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![0.5, 10.0]);
        assert_eq!(empirical_risk(&pts, &brute_force_codebook(&pts, 3).unwrap()), 0.0);
        let c = brute_force_codebook(&pts, 1).unwrap();
        assert_abs_diff_eq!(c.center(0)[0], 11.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(
            brute_force_codebook(&col(&[0.0; 13]), 2),
            Err(Error::Refused(_))
        ));
        assert!(matches!(brute_force_codebook(&pts, 4), Err(Error::Refused(_))));
    }

    #[test]
    fn rgs_enumeration_counts_partitions() {
        // partitions of 5 items into at most 3 blocks: S(5,1)+S(5,2)+S(5,3) = 1+15+25
        let mut labels = vec![0; 5];
        let mut count = 1;
        while next_rgs(&mut labels, 3) {
            count += 1;
        }
        assert_eq!(count, 41);
    }

    #[test]
    fn plug_in_returns_minimum_over_restarts() {
        let pts = Matrix::from_rows(&[
            [0.0, 0.0], [0.1, 0.3], [4.0, 4.0], [4.2, 3.9], [9.0, 0.0], [8.7, 0.2], [2.0, 7.0],
        ])
        .unwrap();
        let opts = LloydOptions::default();
        let best = plug_in_estimate(&pts, 3, 8, 42, &opts).unwrap();
        for r in 0..8u64 {
            let init = kmeanspp_init(&pts, 3, &mut rng::stream(42, &[r])).unwrap();
            assert!(best.risk <= lloyd(&pts, &init, &opts).risk);
        }
        assert_eq!(best.restarts_used, 8);
        assert_abs_diff_eq!(best.risk, empirical_risk(&pts, &best.codebook), epsilon = 1e-12);
    }

    #[test]
    fn centers_csv_round_trip() {
        let c = Codebook::from_rows(&[[0.1, -2.0], [3.0, 1.0 / 3.0]]).unwrap();
        let back = Codebook::from_csv(c.to_csv().as_bytes()).unwrap();
        assert_eq!(back, c);
    }
}
