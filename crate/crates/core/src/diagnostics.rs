//! Cluster-count, margin and accuracy diagnostics plus subgroup profiles.

use crate::assignment::min_cost_assignment;
use crate::data::{reparametrize, CounterfactualMatrix, Dataset, Parametrization};
use crate::error::{Error, Result};
use crate::io::{csv_text, fmt_f64};
use crate::kmeans::{kmeanspp_init, lloyd, nearest, plug_in_estimate, Codebook, LloydOptions};
use crate::matrix::{sq_dist, Matrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowRow {
    pub k: usize,
    pub wcss: f64,
    /// `(wcss(k−1) − wcss(k)) / wcss(1)`; `None` for `k = 1`.
    pub relative_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowTable {
    pub rows: Vec<ElbowRow>,
}

impl ElbowTable {
    /// Largest `k` whose relative gain exceeds `threshold`.
    pub fn last_gain_above(&self, threshold: f64) -> Option<usize> {
        self.rows
            .iter()
            .filter(|r| r.relative_gain.is_some_and(|g| g > threshold))
            .map(|r| r.k)
            .max()
    }

    pub fn to_csv(&self) -> String {
        csv_text(
            &["k", "wcss", "relative_gain"],
            self.rows.iter().map(|r| {
                vec![
                    r.k.to_string(),
                    fmt_f64(r.wcss),
                    r.relative_gain.map(fmt_f64).unwrap_or_default(),
                ]
            }),
        )
    }
}

/// Within-cluster sum of squares for each `k` in `k_min..=k_max`.
///
/// Each `k` takes the better of `restarts` fresh k-means++ runs and a warm
/// start from the `k − 1` solution plus one D²-drawn center, which keeps the
/// table nonincreasing in `k`.
pub fn elbow_scan(
    points: &Matrix,
    k_min: usize,
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<ElbowTable> {
    if k_min < 1 || k_max < k_min {
        return Err(Error::Config(format!("invalid k range {k_min}..={k_max}")));
    }
    let opts = LloydOptions::default();
    let n = points.nrows() as f64;
    let mut wcss = Vec::with_capacity(k_max);
    let mut previous: Option<Codebook> = None;
    for k in 1..=k_max {
        let fresh = plug_in_estimate(points, k, restarts.max(1), rng::derive_seed(seed, &[k as u64]), &opts)
            .map_err(|e| match e {
                Error::Init(m) => Error::Config(format!("k_max too large: {m}")),
                other => other,
            })?;
        let mut best = fresh;
        if let Some(prev) = &previous {
            let mut rng = rng::stream(seed, &[k as u64, u64::MAX]);
            let warm = extend_codebook(points, prev, &mut rng);
            let fit = lloyd(points, &warm, &opts);
            if fit.risk < best.risk {
                best = fit;
            }
        }
        wcss.push(best.risk * n);
        previous = Some(best.codebook);
    }
    let rows = (k_min..=k_max)
        .map(|k| ElbowRow {
            k,
            wcss: wcss[k - 1],
            relative_gain: (k >= 2).then(|| {
                if wcss[0] > 0.0 {
                    (wcss[k - 2] - wcss[k - 1]) / wcss[0]
                } else {
                    0.0
                }
            }),
        })
        .collect();
    Ok(ElbowTable { rows })
}

/// Appends one D²-weighted draw to an existing codebook.
fn extend_codebook<R: rand::Rng>(points: &Matrix, prev: &Codebook, rng: &mut R) -> Codebook {
    let d2: Vec<f64> = points.rows_iter().map(|x| nearest(x, prev).1).collect();
    let total: f64 = d2.iter().sum();
    let mut rows: Vec<Vec<f64>> = (0..prev.k()).map(|j| prev.center(j).to_vec()).collect();
    if total > 0.0 {
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = 0;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = i;
            if acc > target {
                break;
            }
        }
        rows.push(points.row(pick).to_vec());
    } else {
        let extra = kmeanspp_init(points, 1, rng).expect("nonempty points");
        rows.push(extra.center(0).to_vec());
    }
    Codebook::from_rows(&rows).expect("finite centers")
}

/// Aligned L1 distance between two codebooks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookError {
    /// `min_σ Σ_j ‖ĉ_j − c*_σ(j)‖₁`.
    pub raw_l1: f64,
    pub per_center: f64,
}

const PERMUTATION_SEARCH_MAX_K: usize = 8;

pub fn codebook_error(estimate: &Codebook, truth: &Codebook) -> Result<CodebookError> {
    if estimate.k() != truth.k() || estimate.p() != truth.p() {
        return Err(Error::Shape(format!(
            "codebooks differ in shape: {}x{} vs {}x{}",
            estimate.k(),
            estimate.p(),
            truth.k(),
            truth.p()
        )));
    }
    let k = estimate.k();
    let mut cost = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let d: f64 = estimate
                .center(i)
                .iter()
                .zip(truth.center(j))
                .map(|(a, b)| (a - b).abs())
                .sum();
            cost.set(i, j, d);
        }
    }
    let raw_l1 = if k <= PERMUTATION_SEARCH_MAX_K {
        best_permutation_cost(&cost)
    } else {
        min_cost_assignment(&cost)
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.get(i, j))
            .sum()
    };
    Ok(CodebookError {
        raw_l1,
        per_center: raw_l1 / k as f64,
    })
}

fn best_permutation_cost(cost: &Matrix) -> f64 {
    fn rec(cost: &Matrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if row == cost.nrows() {
            *best = acc;
            return;
        }
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

/// Distances of one point to the Voronoi boundary of its cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryDistance {
    /// `‖x − c_second‖ − ‖x − c_nearest‖`.
    pub gap: f64,
    /// Euclidean distance to the nearest bisecting hyperplane between the
    /// own center and any other center, i.e. to the cell boundary.
    pub bisector: f64,
}

pub fn boundary_distance(x: &[f64], c: &Codebook) -> BoundaryDistance {
    if c.k() < 2 {
        return BoundaryDistance {
            gap: f64::INFINITY,
            bisector: f64::INFINITY,
        };
    }
    let (own, d_own) = nearest(x, c);
    let mut second = f64::INFINITY;
    let mut bisector = f64::INFINITY;
    for j in (0..c.k()).filter(|&j| j != own) {
        let d_j = sq_dist(x, c.center(j));
        second = second.min(d_j);
        let sep = sq_dist(c.center(own), c.center(j)).sqrt();
        if sep > 0.0 {
            bisector = bisector.min((d_j - d_own) / (2.0 * sep));
        } else {
            bisector = 0.0;
        }
    }
    BoundaryDistance {
        gap: second.sqrt() - d_own.sqrt(),
        bisector,
    }
}

/// Fraction of rows whose nearest/second-nearest distance gap is at most
/// `2t`, i.e. within `t` of a bisector along the line joining the centers.
pub fn boundary_mass(points: &Matrix, c: &Codebook, t: f64) -> f64 {
    let n = points.nrows();
    if n == 0 {
        return 0.0;
    }
    points
        .rows_iter()
        .filter(|x| boundary_distance(x, c).gap <= 2.0 * t)
        .count() as f64
        / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow {
    pub t: f64,
    pub gap_mass: f64,
    pub bisector_mass: f64,
}

/// Both boundary-mass measures over a grid of radii.
pub fn boundary_table(points: &Matrix, c: &Codebook, t_grid: &[f64]) -> Vec<BoundaryRow> {
    let dists: Vec<BoundaryDistance> = points.rows_iter().map(|x| boundary_distance(x, c)).collect();
    let n = dists.len().max(1) as f64;
    t_grid
        .iter()
        .map(|&t| BoundaryRow {
            t,
            gap_mass: dists.iter().filter(|d| d.gap <= 2.0 * t).count() as f64 / n,
            bisector_mass: dists.iter().filter(|d| d.bisector <= t).count() as f64 / n,
        })
        .collect()
}

pub fn boundary_table_csv(rows: &[BoundaryRow]) -> String {
    csv_text(
        &["t", "gap_mass", "bisector_mass"],
        rows.iter()
            .map(|r| vec![fmt_f64(r.t), fmt_f64(r.gap_mass), fmt_f64(r.bisector_mass)]),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CateSummary {
    /// 1-based arms; the contrast is `μ_arm − μ_reference`.
    pub arm: usize,
    pub reference: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CateValue {
    /// 0-based unit and cluster.
    pub unit: usize,
    pub cluster: usize,
    pub arm: usize,
    pub reference: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub size: usize,
    /// Standardized covariate means; empty when the cluster is empty.
    pub zmeans: Vec<f64>,
    pub cate: Vec<CateSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProfile {
    pub clusters: Vec<ClusterSummary>,
    /// Covariates with zero sample variance; their z-scores are reported as 0.
    pub zero_variance: Vec<bool>,
    /// Per-unit contrasts, exported for density plots.
    pub cate_values: Vec<CateValue>,
}

impl ClusterProfile {
    /// `cluster,size,cov,zmean` with 1-based cluster and covariate labels.
    pub fn covariates_csv(&self) -> String {
        let mut rows = Vec::new();
        for (j, c) in self.clusters.iter().enumerate() {
            if c.zmeans.is_empty() {
                rows.push(vec![(j + 1).to_string(), "0".into(), String::new(), String::new()]);
            }
            for (v, z) in c.zmeans.iter().enumerate() {
                rows.push(vec![
                    (j + 1).to_string(),
                    c.size.to_string(),
                    format!("x{}", v + 1),
                    fmt_f64(*z),
                ]);
            }
        }
        csv_text(&["cluster", "size", "cov", "zmean"], rows)
    }

    /// `cluster,pair,cate_mean,cate_sd`; pair `a-b` is `μ_a − μ_b`.
    pub fn cate_csv(&self) -> String {
        let mut rows = Vec::new();
        for (j, c) in self.clusters.iter().enumerate() {
            for s in &c.cate {
                let (m, sd) = if c.size == 0 {
                    (String::new(), String::new())
                } else {
                    (fmt_f64(s.mean), fmt_f64(s.sd))
                };
                rows.push(vec![(j + 1).to_string(), format!("{}-{}", s.arm, s.reference), m, sd]);
            }
        }
        csv_text(&["cluster", "pair", "cate_mean", "cate_sd"], rows)
    }

    /// Raw per-unit contrasts: `unit,cluster,pair,cate`.
    pub fn cate_values_csv(&self) -> String {
        csv_text(
            &["unit", "cluster", "pair", "cate"],
            self.cate_values.iter().map(|c| {
                vec![
                    (c.unit + 1).to_string(),
                    (c.cluster + 1).to_string(),
                    format!("{}-{}", c.arm, c.reference),
                    fmt_f64(c.value),
                ]
            }),
        )
    }
}

/// Per-cluster standardized covariate means and pairwise contrast summaries.
///
/// `assignments` are 0-based cluster labels below `k`. Standardization uses
/// the full-sample mean and the population (`n`) standard deviation.
pub fn cluster_profiles(
    dataset: &Dataset,
    mu_hat: &CounterfactualMatrix,
    assignments: &[usize],
    k: usize,
) -> Result<ClusterProfile> {
    let n = dataset.n();
    if assignments.len() != n || mu_hat.values().nrows() != n {
        return Err(Error::Shape("profiles need one label and one mean row per unit".into()));
    }
    if let Some(&bad) = assignments.iter().find(|&&j| j >= k) {
        return Err(Error::Data(format!("cluster label {} outside 1..={k}", bad + 1)));
    }
    let levels = match mu_hat.parametrization() {
        Parametrization::Levels => mu_hat.clone(),
        Parametrization::ContrastsVsBaseline => reparametrize(mu_hat, Parametrization::Levels)?,
    };
    let mu = levels.values();
    let (d, p) = (dataset.d(), mu.ncols());
    let x = dataset.covariates();

    let mut mean = vec![0.0; d];
    for row in x.rows_iter() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sd = vec![0.0; d];
    for row in x.rows_iter() {
        for v in 0..d {
            sd[v] += (row[v] - mean[v]).powi(2) / n as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt());
    let zero_variance: Vec<bool> = sd.iter().map(|&s| s == 0.0).collect();

    let pairs: Vec<(usize, usize)> = (1..=p)
        .flat_map(|a| (1..a).map(move |b| (a, b)))
        .collect();

    let mut cate_values = Vec::with_capacity(n * pairs.len());
    let mut clusters = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == j).collect();
        let size = members.len();
        if size == 0 {
            clusters.push(ClusterSummary {
                size,
                zmeans: Vec::new(),
                cate: pairs
                    .iter()
                    .map(|&(a, b)| CateSummary { arm: a, reference: b, mean: f64::NAN, sd: f64::NAN })
                    .collect(),
            });
            continue;
        }
        let m = size as f64;
        let zmeans = (0..d)
            .map(|v| {
                if zero_variance[v] {
                    0.0
                } else {
                    members.iter().map(|&i| (x.get(i, v) - mean[v]) / sd[v]).sum::<f64>() / m
                }
            })
            .collect();
        let cate = pairs
            .iter()
            .map(|&(a, b)| {
                let vals: Vec<f64> = members.iter().map(|&i| mu.get(i, a - 1) - mu.get(i, b - 1)).collect();
                let mean = vals.iter().sum::<f64>() / m;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                CateSummary { arm: a, reference: b, mean, sd: var.sqrt() }
            })
            .collect();
        clusters.push(ClusterSummary { size, zmeans, cate });
    }
    for i in 0..n {
        for &(a, b) in &pairs {
            cate_values.push(CateValue {
                unit: i,
                cluster: assignments[i],
                arm: a,
                reference: b,
                value: mu.get(i, a - 1) - mu.get(i, b - 1),
            });
        }
    }
    Ok(ClusterProfile {
        clusters,
        zero_variance,
        cate_values,
    })
}
