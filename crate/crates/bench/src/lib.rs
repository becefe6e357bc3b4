//! Shared fixtures for the criterion benches under `benches/`.

use causal_kmeans::simulation::{generate_sample, replication_scores, SimSample};
use causal_kmeans::{rng, CrossFitScores, SimConfig};

/// A design sample of size `n` with its cross-fitted scores.
pub fn design(n: usize, seed: u64) -> (SimSample, CrossFitScores) {
    let cfg = SimConfig::default();
    let sample = generate_sample(n, &mut rng::stream(seed, &[1]), &cfg).expect("valid design");
    let scores = replication_scores(&sample, seed, &cfg).expect("cross-fit succeeds");
    (sample, scores)
}
