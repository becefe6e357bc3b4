//! Causal k-means clustering.
//!
//! Clusters units by their conditional counterfactual mean vectors
//! `μ(x) = (E[Y¹ | x], …, E[Yᵖ | x])`. Two estimators are provided: the
//! plug-in codebook, which runs k-means on fitted means, and an
//! influence-function estimator, which minimizes a cross-fitted, bias
//! corrected estimate of the clustering risk.

pub mod assignment;
pub mod data;
pub mod diagnostics;
pub mod eif;
pub mod error;
pub mod io;
pub mod kmeans;
pub mod matrix;
pub mod nuisance;
pub mod rng;
pub mod simulation;

pub use data::{
    assign_folds, load_dataset, read_dataset, reparametrize, CounterfactualMatrix, Dataset,
    FoldAssignment, ObservedUnit, Parametrization,
};
pub use diagnostics::{
    boundary_mass, cluster_profiles, codebook_error, elbow_scan, ClusterProfile, CodebookError,
    ElbowTable,
};
pub use eif::{
    derivative_matrix, gradient, minimize_semiparametric, phi_c_score, risk_hat, GradientBlock,
    SemiMethod, SemiOptions,
};
pub use error::{Error, ErrorKind, Result};
pub use kmeans::{
    brute_force_codebook, empirical_risk, kmeanspp_init, lloyd, plug_in_estimate, project,
    Codebook, FitResult, LloydOptions,
};
pub use matrix::Matrix;
pub use nuisance::{
    clip_propensity, cross_fit, fit_outcome_regression, fit_propensity, CrossFitScores,
    FeatureSpec, NuisanceSpec, OutcomeModel, OutcomeSpec, PropensityModel,
};
pub use simulation::{
    generate_sample, hexagon_centers, oracle_population_risk, run_replication, run_study,
    Estimator, SimConfig, StudyResult,
};
