#![allow(dead_code)]

use causal_kmeans::rng;
use causal_kmeans::simulation::{generate_sample, SimConfig, SimSample};
use causal_kmeans::{Codebook, CrossFitScores, Matrix};
use rand::Rng;

/// Noise-free design sample with the true nuisances plugged in, so that
/// `phi1 == mu` and `phi2 == mu²` hold exactly.
pub fn exact_scores(n: usize, seed: u64) -> (SimSample, CrossFitScores) {
    let cfg = SimConfig {
        sigma: 0.0,
        delta: 0.3,
        ..SimConfig::default()
    };
    let sample = generate_sample(n, &mut rng::stream(seed, &[101]), &cfg).unwrap();
    let folds: Vec<usize> = (0..n).map(|i| 1 + i % 2).collect();
    let scores = CrossFitScores::from_nuisance_values(
        &sample.dataset,
        sample.mu.clone(),
        sample.propensity_matrix(),
        folds,
        2,
    )
    .unwrap();
    (sample, scores)
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, p: usize, scale: f64) -> Matrix {
    let data = (0..n * p).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(n, p, data).unwrap()
}

pub fn random_codebook<R: Rng>(rng: &mut R, k: usize, p: usize, scale: f64) -> Codebook {
    Codebook::new(random_points(rng, k, p, scale)).unwrap()
}

/// Codebook near the hexagon vertices with a random perturbation.
pub fn perturbed_hexagon<R: Rng>(rng: &mut R, spread: f64) -> Codebook {
    let h = causal_kmeans::hexagon_centers();
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|j| h.center(j).iter().map(|v| v + rng.random_range(-spread..spread)).collect())
        .collect();
    Codebook::from_rows(&rows).unwrap()
}

pub fn sorted_centers(c: &Codebook) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..c.k()).map(|j| c.center(j).to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows
}
