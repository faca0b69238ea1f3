//! Internal-instrument estimation for clustered linear regressions under
//! user-declared exclusion restrictions.
//!
//! Consider the regression `y_l = x_l * beta + w_l' * delta + e_l` with
//! observations grouped into independent clusters. Ordinary least squares on
//! the residualized variables is biased whenever the regressor of one
//! observation is correlated with the error of another observation in the
//! same cluster (lagged outcomes, feedback, spillovers). This crate
//! constructs an *internal instrument*: a centering matrix `A` that recombines
//! the observations themselves such that `x' A y / x' A x` is free of that
//! bias, given a caller-declared exclusion matrix `E` marking which
//! regressor/error pairs may be correlated.
//!
//! The centering matrix of choice, `A*`, is the closest matrix (in Frobenius
//! norm) to the annihilator `M = I - W (W'W)^-1 W'` among all matrices that
//! (a) are unaffected by the controls on the required side and (b) carry
//! exact zeros at every pair excluded by `E`. Three independent
//! constructions are provided and cross-checked, together with bias-free
//! point estimation, cluster-jackknife variance, weak-identification-robust
//! test inversion, and a Monte Carlo harness.
//!
//! Modules:
//! - [`projections`]: control designs, annihilator matrices, masked
//!   (leave-out) projection rows, symmetric pseudoinverses.
//! - [`exclusion`]: cluster partitions and exclusion-matrix recipes.
//! - [`centering`]: the three `A*` constructions, class validation,
//!   diagnostics, sparse export.
//! - [`estimator`]: point estimation and the bias plug-in for lagged-outcome
//!   panels.
//! - [`inference`]: jackknife variance, score-type tests, confidence-set
//!   inversion.
//! - [`simulation`]: data-generating processes, the Monte Carlo harness, and
//!   distribution experiments.

pub mod centering;
pub mod error;
pub mod estimator;
pub mod exclusion;
pub mod inference;
pub mod projections;
pub mod simulation;

pub use centering::{
    build_astar, design_instrument, oracle_dense, CenteringDiagnostics, CenteringMatrix,
    CenteringMethod, CenteringMode, ClassViolations,
};
pub use error::Error;
pub use estimator::{estimate, estimate_iv_form, nickell_bias_plugin, ClusteredDataset, Estimate};
pub use exclusion::{ClusterPartition, ExclusionMatrix, ExclusionRecipe};
pub use inference::{
    ar_test, cluster_robust_variance, invert_ar, jackknife_variance, numerator_stat, t_interval,
    ArTest, ConfidenceSet, InferenceReport, NumeratorStat, SetKind,
};
pub use projections::{build_projection, pseudoinverse, ControlMatrix, ProjectionMatrix};
pub use simulation::{
    batch_means_se, decomposition_experiment, ks_statistic_standard_normal, negligibility_ratios,
    quadratic_clt_experiment, run_monte_carlo, write_rep_csv, DecompositionReport, Design,
    DgpSpec, Generated, McConfig, McEngine, McReport, NegligibilityRatios, QuadraticCltReport,
    RepOutcome, ShockCovariance, ShockDistribution, ShockModel,
};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
