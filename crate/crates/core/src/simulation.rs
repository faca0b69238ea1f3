//! Data-generating processes, the Monte Carlo harness, and distribution
//! experiments.
//!
//! Every simulation is deterministic given its configuration: replication
//! `r` draws from a counter-based generator seeded by the base seed with
//! stream id `r + 1` (stream 0 is reserved for design-level randomness such
//! as spatial coordinates). Replications run in parallel and are aggregated
//! in replication order, so reports are bitwise reproducible.
//!
//! Monte Carlo standard errors use 20 batch means: the replication sequence
//! is split into 20 contiguous batches and the standard error of the batch
//! means is reported.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::HashMap;

use crate::centering::{
    build_astar, CenteringDiagnostics, CenteringMatrix, CenteringMethod, CenteringMode,
};
use crate::error::Error;
use crate::estimator::{estimate, ClusteredDataset};
use crate::exclusion::{ClusterPartition, ExclusionMatrix, ExclusionRecipe};
use crate::inference::{
    ar_test, cluster_robust_variance, invert_ar, jackknife_variance, numerator_stat, SetKind,
};
use crate::projections::{build_projection, ControlMatrix, ProjectionMatrix};
use crate::Result;

/// Number of batches used for Monte Carlo standard errors.
pub const MC_BATCHES: usize = 20;

/// Abort threshold: simulations stop when more than this share of
/// replications fail.
pub const MC_FAILURE_SHARE: f64 = 0.01;

// ---------------------------------------------------------------------------
// Shock models
// ---------------------------------------------------------------------------

/// Marginal distribution of the underlying unit-variance components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockDistribution {
    Gaussian,
    /// A scale mixture of Rademacher draws (values `+-0.5` and
    /// `+-sqrt(1.75)`, each scale with probability 1/2): mean zero, unit
    /// variance, bounded with non-Gaussian fourth moment.
    RademacherMixture,
}

/// Within-cluster covariance of the shock vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShockCovariance {
    /// `sigma2 * I`.
    Iid { sigma2: f64 },
    /// `sigma2 * I + phi^2 * J` (an equicorrelated cluster factor).
    ClusterFactor { sigma2: f64, phi: f64 },
    /// `Sigma[s,t] = sigma2 * rho^|s-t|`.
    ArDecay { sigma2: f64, rho: f64 },
}

/// Distribution plus covariance of cluster-level shocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockModel {
    pub distribution: ShockDistribution,
    pub covariance: ShockCovariance,
}

impl Default for ShockModel {
    fn default() -> Self {
        Self {
            distribution: ShockDistribution::Gaussian,
            covariance: ShockCovariance::Iid { sigma2: 1.0 },
        }
    }
}

impl ShockModel {
    /// The within-cluster covariance matrix for a cluster of size `t`.
    pub fn covariance_matrix(&self, t: usize) -> DMatrix<f64> {
        match self.covariance {
            ShockCovariance::Iid { sigma2 } => DMatrix::identity(t, t) * sigma2,
            ShockCovariance::ClusterFactor { sigma2, phi } => {
                DMatrix::from_fn(t, t, |i, j| {
                    phi * phi + if i == j { sigma2 } else { 0.0 }
                })
            }
            ShockCovariance::ArDecay { sigma2, rho } => {
                DMatrix::from_fn(t, t, |i, j| sigma2 * rho.powi((i as i32 - j as i32).abs()))
            }
        }
    }

    /// Operator norm of the size-`t` covariance block.
    pub fn covariance_operator_norm(&self, t: usize) -> f64 {
        match self.covariance {
            ShockCovariance::Iid { sigma2 } => sigma2,
            ShockCovariance::ClusterFactor { sigma2, phi } => sigma2 + phi * phi * t as f64,
            ShockCovariance::ArDecay { .. } => {
                let eig = self.covariance_matrix(t).symmetric_eigen();
                eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
            }
        }
    }
}

/// Draws one unit-variance component.
fn draw_component(dist: ShockDistribution, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        ShockDistribution::Gaussian => StandardNormal.sample(rng),
        ShockDistribution::RademacherMixture => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let scale = if rng.random::<bool>() {
                0.5
            } else {
                1.75f64.sqrt()
            };
            sign * scale
        }
    }
}

/// Precomputed square roots of the covariance blocks, keyed by cluster size.
struct ShockSampler {
    model: ShockModel,
    roots: HashMap<usize, DMatrix<f64>>,
}

impl ShockSampler {
    fn new(model: ShockModel, partition: &ClusterPartition) -> Self {
        let mut roots = HashMap::new();
        for size in partition.sizes() {
            roots.entry(size).or_insert_with(|| {
                let cov = model.covariance_matrix(size);
                let eig = cov.symmetric_eigen();
                let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let u = &eig.eigenvectors;
                let scaled = DMatrix::from_fn(size, size, |i, j| u[(i, j)] * vals[j]);
                &scaled * u.transpose()
            });
        }
        Self { model, roots }
    }

    /// Fills `out` at the member positions of each cluster with correlated
    /// shocks.
    fn draw(&self, partition: &ClusterPartition, rng: &mut ChaCha8Rng, out: &mut DVector<f64>) {
        for i in 0..partition.num_clusters() {
            let members = partition.members(i);
            let t = members.len();
            let root = &self.roots[&t];
            let xi = DVector::from_fn(t, |_, _| draw_component(self.model.distribution, rng));
            let shocks = root * xi;
            for (p, &l) in members.iter().enumerate() {
                out[l] = shocks[p];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Data-generating processes
// ---------------------------------------------------------------------------

/// The supported designs. All regressor constructions have mean zero (or a
/// known mean, exposed as `lambda`), so the latent deviation `v = x - lambda`
/// is available to the distribution experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    /// `y_it = alpha_i + beta x_it + e_it` with strictly exogenous iid
    /// standard normal `x` and cluster fixed effects.
    StaticPanel {
        clusters: usize,
        periods: usize,
        beta: f64,
        #[serde(default = "default_sigma_alpha")]
        sigma_alpha: f64,
    },
    /// First-order autoregression with cluster fixed effects:
    /// `y_it = alpha_i + beta y_{i,t-1} + e_it`, regressor `x_it = y_{i,t-1}`.
    /// Starts from the stationary distribution when `|beta| < 1`, otherwise
    /// from `alpha_i + u` with unit-variance `u`.
    DynamicPanel {
        clusters: usize,
        periods: usize,
        beta: f64,
        #[serde(default = "default_sigma_alpha")]
        sigma_alpha: f64,
    },
    /// One-period feedback: `x_it = feedback * e_{i,t-1} + eta_it` and
    /// `y_it = alpha_i + beta x_it + e_it`.
    FeedbackPanel {
        clusters: usize,
        periods: usize,
        beta: f64,
        feedback: f64,
        #[serde(default = "default_sigma_alpha")]
        sigma_alpha: f64,
    },
    /// Three periods, student fixed effects plus per-period teacher fixed
    /// effects (two teachers per period, one redundant dummy dropped), with
    /// one-period feedback `x_it = feedback * e_{i,t-1} + eta_it`. Clusters
    /// are students; the teacher dummies make the centering matrix genuinely
    /// non-block-diagonal, which is what the conservative-jackknife and
    /// cross-cluster interaction experiments exercise.
    TwoWayFe {
        students: usize,
        beta: f64,
        feedback: f64,
        #[serde(default = "default_sigma_alpha")]
        sigma_alpha: f64,
        #[serde(default = "default_sigma_alpha")]
        sigma_teacher: f64,
    },
    /// Villages grouped into spatially separated sub-locations with binary
    /// treatment (propensity 1/2) and additive interference from same-cluster
    /// villages strictly closer than `range`:
    /// `y_l = beta x_l + interference * sum_neighbors x_l' + e_l`.
    /// Estimated in design mode with sub-location fixed effects.
    SpatialInterference {
        clusters: usize,
        villages_per_cluster: usize,
        beta: f64,
        interference: f64,
        range: f64,
        /// Side length of the square each cluster's villages are drawn from.
        #[serde(default = "default_box_side")]
        box_side: f64,
    },
}

fn default_sigma_alpha() -> f64 {
    1.0
}

/// Teacher id (0..6) of student `s` in period `p` (0..3) for the two-way
/// design. Periods use disjoint teacher pairs {0,1}, {2,3}, {4,5}; the
/// within-pair choice alternates at stride `2^p`, so consecutive students
/// share two of their three teachers and the assignment graph is connected.
fn teacher_of(s: usize, p: usize) -> usize {
    2 * p + (s >> p) % 2
}

fn default_box_side() -> f64 {
    4.0
}

/// Fixed (replication-invariant) parts of a design.
pub struct Design {
    pub partition: ClusterPartition,
    pub controls: ControlMatrix,
    pub times: Option<Vec<i64>>,
    pub coords: Option<Vec<(f64, f64)>>,
    /// Same-cluster interference neighbors (spatial design only).
    neighbors: Option<Vec<Vec<usize>>>,
}

/// One replication's draw.
pub struct Generated {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    /// The structural shocks `e`.
    pub shocks: DVector<f64>,
    /// `E[x]` under the design.
    pub lambda: DVector<f64>,
}

impl DgpSpec {
    /// The true structural coefficient.
    pub fn true_beta(&self) -> f64 {
        match *self {
            DgpSpec::StaticPanel { beta, .. }
            | DgpSpec::DynamicPanel { beta, .. }
            | DgpSpec::FeedbackPanel { beta, .. }
            | DgpSpec::TwoWayFe { beta, .. }
            | DgpSpec::SpatialInterference { beta, .. } => beta,
        }
    }

    /// The exclusion recipe under which the design's centering is valid.
    pub fn default_recipe(&self) -> ExclusionRecipe {
        match *self {
            DgpSpec::StaticPanel { .. } => ExclusionRecipe::WeakExogeneity,
            DgpSpec::DynamicPanel { .. } => ExclusionRecipe::WeakExogeneity,
            DgpSpec::FeedbackPanel { .. } => ExclusionRecipe::Horizon(1),
            DgpSpec::TwoWayFe { .. } => ExclusionRecipe::Horizon(1),
            DgpSpec::SpatialInterference { range, .. } => ExclusionRecipe::DistanceCutoff(range),
        }
    }

    /// The centering mode matching the design's identification argument.
    pub fn default_mode(&self) -> CenteringMode {
        match self {
            DgpSpec::SpatialInterference { .. } => CenteringMode::Design,
            _ => CenteringMode::Outcome,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            DgpSpec::StaticPanel { clusters, periods, .. }
            | DgpSpec::DynamicPanel { clusters, periods, .. }
            | DgpSpec::FeedbackPanel { clusters, periods, .. } => {
                if clusters == 0 || periods < 2 {
                    return bad(format!(
                        "panel designs need clusters >= 1 and periods >= 2, got {clusters} and {periods}"
                    ));
                }
            }
            DgpSpec::TwoWayFe { students, .. } => {
                if students < 16 || students % 8 != 0 {
                    return bad(format!(
                        "two-way design needs a multiple of 8 students (>= 16), got {students}"
                    ));
                }
            }
            DgpSpec::SpatialInterference {
                clusters,
                villages_per_cluster,
                range,
                box_side,
                ..
            } => {
                if clusters == 0 || villages_per_cluster < 2 {
                    return bad("spatial design needs clusters >= 1 and villages >= 2".into());
                }
                if !(range >= 0.0 && range.is_finite() && box_side > 0.0) {
                    return bad(format!(
                        "spatial design needs finite range >= 0 and box_side > 0, got {range} and {box_side}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the replication-invariant design. `seed` controls design-level
    /// randomness (spatial coordinates) through stream 0.
    pub fn build_design(&self, seed: u64) -> Result<Design> {
        self.validate()?;
        match *self {
            DgpSpec::StaticPanel {
                clusters, periods, ..
            }
            | DgpSpec::DynamicPanel {
                clusters, periods, ..
            }
            | DgpSpec::FeedbackPanel {
                clusters, periods, ..
            } => {
                let partition = ClusterPartition::balanced(clusters, periods)?;
                let controls = ControlMatrix::group_indicators(partition.assignment().to_vec())?;
                let times: Vec<i64> = (0..clusters * periods)
                    .map(|l| (l % periods + 1) as i64)
                    .collect();
                Ok(Design {
                    partition,
                    controls,
                    times: Some(times),
                    coords: None,
                    neighbors: None,
                })
            }
            DgpSpec::TwoWayFe { students, .. } => {
                let n = 3 * students;
                // Observations ordered (student, period): rows 3s .. 3s+2.
                let partition = ClusterPartition::balanced(students, 3)?;
                let times: Vec<i64> = (0..n).map(|l| (l % 3 + 1) as i64).collect();
                // Two teachers per period; consecutive students share two of
                // their three teachers, so the assignment graph is connected.
                let mut w = DMatrix::zeros(n, students + 5);
                for s in 0..students {
                    for p in 0..3 {
                        w[(3 * s + p, s)] = 1.0;
                        let teacher = teacher_of(s, p);
                        // Teacher dummies for teachers 1..5 (teacher 0
                        // dropped against the student intercepts).
                        if teacher >= 1 {
                            w[(3 * s + p, students + teacher - 1)] = 1.0;
                        }
                    }
                }
                let controls = ControlMatrix::dense(w)?;
                Ok(Design {
                    partition,
                    controls,
                    times: Some(times),
                    coords: None,
                    neighbors: None,
                })
            }
            DgpSpec::SpatialInterference {
                clusters,
                villages_per_cluster,
                range,
                box_side,
                ..
            } => {
                let n = clusters * villages_per_cluster;
                let partition = ClusterPartition::balanced(clusters, villages_per_cluster)?;
                let controls = ControlMatrix::group_indicators(partition.assignment().to_vec())?;
                // Cluster squares placed on a grid with gaps wider than the
                // interference range, so spillovers never cross clusters.
                let side = (clusters as f64).sqrt().ceil() as usize;
                let spacing = box_side + 2.0 * range + 1.0;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(0);
                let mut coords = Vec::with_capacity(n);
                for c in 0..clusters {
                    let cx = (c % side) as f64 * spacing;
                    let cy = (c / side) as f64 * spacing;
                    for _ in 0..villages_per_cluster {
                        let dx: f64 = rng.random::<f64>() * box_side - box_side / 2.0;
                        let dy: f64 = rng.random::<f64>() * box_side - box_side / 2.0;
                        coords.push((cx + dx, cy + dy));
                    }
                }
                let mut neighbors = vec![Vec::new(); n];
                for i in 0..clusters {
                    let members = partition.members(i);
                    for &a in members {
                        for &b in members {
                            if a != b {
                                let dx = coords[a].0 - coords[b].0;
                                let dy = coords[a].1 - coords[b].1;
                                if (dx * dx + dy * dy).sqrt() < range {
                                    neighbors[a].push(b);
                                }
                            }
                        }
                    }
                }
                Ok(Design {
                    partition,
                    controls,
                    times: None,
                    coords: Some(coords),
                    neighbors: Some(neighbors),
                })
            }
        }
    }

    /// Draws one replication.
    pub fn generate(
        &self,
        design: &Design,
        shocks: &ShockSamplerHandle,
        rng: &mut ChaCha8Rng,
    ) -> Generated {
        let n = design.partition.n();
        let mut e = DVector::zeros(n);
        shocks.0.draw(&design.partition, rng, &mut e);
        match *self {
            DgpSpec::StaticPanel {
                clusters,
                periods,
                beta,
                sigma_alpha,
            } => {
                let mut y = DVector::zeros(n);
                let mut x = DVector::zeros(n);
                for i in 0..clusters {
                    let alpha: f64 = sigma_alpha * rng.sample::<f64, _>(StandardNormal);
                    for t in 0..periods {
                        let l = i * periods + t;
                        x[l] = rng.sample::<f64, _>(StandardNormal);
                        y[l] = alpha + beta * x[l] + e[l];
                    }
                }
                Generated {
                    y,
                    x,
                    shocks: e,
                    lambda: DVector::zeros(n),
                }
            }
            DgpSpec::DynamicPanel {
                clusters,
                periods,
                beta,
                sigma_alpha,
            } => {
                let mut y = DVector::zeros(n);
                let mut x = DVector::zeros(n);
                for i in 0..clusters {
                    let alpha: f64 = sigma_alpha * rng.sample::<f64, _>(StandardNormal);
                    let u0: f64 = rng.sample::<f64, _>(StandardNormal);
                    let sigma2 = base_sigma2(&shocks.0.model);
                    let mut lag = if beta.abs() < 1.0 {
                        alpha / (1.0 - beta) + u0 * (sigma2 / (1.0 - beta * beta)).sqrt()
                    } else {
                        alpha + u0 * sigma2.sqrt()
                    };
                    for t in 0..periods {
                        let l = i * periods + t;
                        x[l] = lag;
                        y[l] = alpha + beta * lag + e[l];
                        lag = y[l];
                    }
                }
                Generated {
                    y,
                    x,
                    shocks: e,
                    lambda: DVector::zeros(n),
                }
            }
            DgpSpec::FeedbackPanel {
                clusters,
                periods,
                beta,
                feedback,
                sigma_alpha,
            } => {
                let mut y = DVector::zeros(n);
                let mut x = DVector::zeros(n);
                for i in 0..clusters {
                    let alpha: f64 = sigma_alpha * rng.sample::<f64, _>(StandardNormal);
                    for t in 0..periods {
                        let l = i * periods + t;
                        let eta: f64 = rng.sample::<f64, _>(StandardNormal);
                        x[l] = eta + if t > 0 { feedback * e[l - 1] } else { 0.0 };
                        y[l] = alpha + beta * x[l] + e[l];
                    }
                }
                Generated {
                    y,
                    x,
                    shocks: e,
                    lambda: DVector::zeros(n),
                }
            }
            DgpSpec::TwoWayFe {
                students,
                beta,
                feedback,
                sigma_alpha,
                sigma_teacher,
            } => {
                let teacher_fx: Vec<f64> = (0..6)
                    .map(|_| sigma_teacher * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut y = DVector::zeros(n);
                let mut x = DVector::zeros(n);
                for s in 0..students {
                    let alpha: f64 = sigma_alpha * rng.sample::<f64, _>(StandardNormal);
                    for p in 0..3 {
                        let l = 3 * s + p;
                        let eta: f64 = rng.sample::<f64, _>(StandardNormal);
                        x[l] = eta + if p > 0 { feedback * e[l - 1] } else { 0.0 };
                        y[l] = alpha + teacher_fx[teacher_of(s, p)] + beta * x[l] + e[l];
                    }
                }
                Generated {
                    y,
                    x,
                    shocks: e,
                    lambda: DVector::zeros(n),
                }
            }
            DgpSpec::SpatialInterference {
                beta, interference, ..
            } => {
                let neighbors = design
                    .neighbors
                    .as_ref()
                    .expect("spatial design carries neighbor lists");
                let x = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
                let mut y = DVector::zeros(n);
                for l in 0..n {
                    let spill: f64 = neighbors[l].iter().map(|&m| x[m]).sum();
                    y[l] = beta * x[l] + interference * spill + e[l];
                }
                Generated {
                    y,
                    x,
                    shocks: e,
                    lambda: DVector::from_element(n, 0.5),
                }
            }
        }
    }
}

/// The innovation variance of the shock model (diagonal of the covariance).
fn base_sigma2(model: &ShockModel) -> f64 {
    match model.covariance {
        ShockCovariance::Iid { sigma2 } => sigma2,
        ShockCovariance::ClusterFactor { sigma2, phi } => sigma2 + phi * phi,
        ShockCovariance::ArDecay { sigma2, .. } => sigma2,
    }
}

/// Opaque handle wrapping the per-size covariance roots.
pub struct ShockSamplerHandle(ShockSampler);

impl ShockSamplerHandle {
    /// Precomputes covariance square roots for the partition's cluster sizes.
    pub fn new(model: ShockModel, partition: &ClusterPartition) -> Self {
        Self(ShockSampler::new(model, partition))
    }

    /// Draws one full shock vector.
    pub fn draw_into(
        &self,
        partition: &ClusterPartition,
        rng: &mut ChaCha8Rng,
        out: &mut DVector<f64>,
    ) {
        self.0.draw(partition, rng, out)
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

/// Full Monte Carlo configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpSpec,
    #[serde(default)]
    pub shocks: ShockModel,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Exclusion recipe; defaults to the DGP's valid recipe.
    #[serde(default)]
    pub recipe: Option<ExclusionRecipe>,
    /// Centering mode; defaults to the DGP's natural mode.
    #[serde(default)]
    pub mode: Option<CenteringMode>,
    /// Construction method; defaults to the leave-out path.
    #[serde(default)]
    pub method: Option<CenteringMethod>,
    /// Hypothesized coefficient for the score test; defaults to the true
    /// beta.
    #[serde(default)]
    pub beta0: Option<f64>,
}

fn default_alpha() -> f64 {
    0.05
}

impl McConfig {
    /// Parses a TOML configuration (see the repository README for the
    /// documented key-value grammar).
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Serializes back to TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Per-replication outcomes retained by the harness.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RepOutcome {
    pub rep: usize,
    /// Point estimate with the centering matrix; absent when the denominator
    /// degenerated.
    pub beta_astar: Option<f64>,
    /// Least-squares (annihilator) estimate.
    pub beta_ls: f64,
    /// Numerator statistic at the hypothesized beta0.
    pub z_beta0: f64,
    /// Jackknife variance at beta0.
    pub v_jackknife: f64,
    /// Cluster-robust variance at beta0.
    pub v_cluster_robust: f64,
    /// Score test rejected at beta0.
    pub ar_reject: bool,
    pub set_kind: SetKind,
    /// Confidence set covers the true beta.
    pub set_covers_truth: bool,
    /// Confidence set covers the point estimate (must always hold when the
    /// estimate exists).
    pub set_covers_estimate: bool,
}

/// Aggregated Monte Carlo report.
#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub config: McConfig,
    pub true_beta: f64,
    pub beta0: f64,
    pub replications: usize,
    pub failures: usize,
    /// Replications where the point estimate was degenerate (excluded from
    /// bias averages, retained for set coverage).
    pub degenerate_estimates: usize,
    pub mean_bias_astar: f64,
    pub mc_se_bias_astar: f64,
    pub mean_bias_ls: f64,
    pub mc_se_bias_ls: f64,
    /// Share of replications rejecting the true beta0.
    pub ar_size: f64,
    pub ar_size_se: f64,
    /// Share of confidence sets covering the true beta.
    pub set_coverage: f64,
    /// Share of confidence sets covering the point estimate, among
    /// non-degenerate replications.
    pub set_covers_estimate_share: f64,
    pub kind_counts: KindCounts,
    /// Mean jackknife variance at beta0.
    pub mean_v_jackknife: f64,
    /// Monte Carlo variance of the numerator statistic at beta0.
    pub var_z: f64,
    /// Mean of `V_jk - Z^2` (zero in expectation for block-diagonal
    /// centering, nonnegative in general) with its batch standard error.
    pub jackknife_gap_mean: f64,
    pub jackknife_gap_se: f64,
    /// Mean absolute difference between jackknife and cluster-robust
    /// variances (zero when the centering matrix is block-diagonal).
    pub mean_abs_vjk_minus_vcr: f64,
    pub centering: CenteringDiagnostics,
}

/// Confidence-set kind tally.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct KindCounts {
    pub bounded_interval: usize,
    pub complement_of_interval: usize,
    pub whole_line: usize,
}

/// Standard error from `MC_BATCHES` contiguous batch means.
pub fn batch_means_se(values: &[f64]) -> f64 {
    let b = MC_BATCHES.min(values.len().max(1));
    if values.len() < 2 || b < 2 {
        return f64::NAN;
    }
    let per = values.len() / b;
    let usable = per * b;
    let means: Vec<f64> = (0..b)
        .map(|i| values[i * per..(i + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (b as f64 - 1.0);
    let _ = usable;
    (var / b as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn population_var(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// The fixed per-configuration machinery shared by all replications.
pub struct McEngine {
    pub config: McConfig,
    pub design: Design,
    pub exclusion: ExclusionMatrix,
    pub projection: ProjectionMatrix,
    pub astar: CenteringMatrix,
    shocks: ShockSamplerHandle,
}

impl McEngine {
    /// Builds design, exclusion, projection, and centering once.
    pub fn new(config: McConfig) -> Result<Self> {
        if config.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,1), got {}",
                config.alpha
            )));
        }
        let design = config.dgp.build_design(config.seed)?;
        let recipe = config
            .recipe
            .clone()
            .unwrap_or_else(|| config.dgp.default_recipe());
        let exclusion = ExclusionMatrix::from_recipe(
            design.partition.clone(),
            &recipe,
            design.times.as_deref(),
            design.coords.as_deref(),
        )?;
        let projection = build_projection(design.controls.clone())?;
        let mode = config.mode.unwrap_or_else(|| config.dgp.default_mode());
        let method = config.method.unwrap_or(CenteringMethod::LeaveOut);
        let astar = build_astar(&projection, &exclusion, mode, method)?;
        let shocks = ShockSamplerHandle::new(config.shocks, &design.partition);
        Ok(Self {
            config,
            design,
            exclusion,
            projection,
            astar,
            shocks,
        })
    }

    /// Seeded generator for replication `rep` (streams are 1-based; stream 0
    /// is design-level).
    pub fn rep_rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(rep as u64 + 1);
        rng
    }

    /// Draws replication `rep`.
    pub fn generate(&self, rep: usize) -> Generated {
        let mut rng = self.rep_rng(rep);
        self.config
            .dgp
            .generate(&self.design, &self.shocks, &mut rng)
    }

    fn run_rep(&self, rep: usize, beta0: f64) -> Result<RepOutcome> {
        let g = self.generate(rep);
        let data = ClusteredDataset::new(
            g.y.clone(),
            g.x.clone(),
            self.design.controls.clone(),
            self.design.partition.clone(),
        )?;
        let my = self.projection.residualize(&data.y);
        let mx = self.projection.residualize(&data.x);
        let beta_ls = data.x.dot(&my) / data.x.dot(&mx);
        let beta_astar = match estimate(&data, &self.astar) {
            Ok(est) => Some(est.beta),
            Err(Error::DegenerateDenominator { .. }) => None,
            Err(e) => return Err(e),
        };
        let stat = numerator_stat(&data, &self.astar, beta0)?;
        let v_jackknife = jackknife_variance(&stat);
        let v_cluster_robust = cluster_robust_variance(&data, &self.astar, beta0)?;
        let ar = ar_test(&data, &self.astar, beta0, self.config.alpha)?;
        let set = invert_ar(&data, &self.astar, self.config.alpha)?;
        let true_beta = self.config.dgp.true_beta();
        Ok(RepOutcome {
            rep,
            beta_astar,
            beta_ls,
            z_beta0: stat.total,
            v_jackknife,
            v_cluster_robust,
            ar_reject: ar.reject,
            set_kind: set.kind,
            set_covers_truth: set.contains(true_beta),
            set_covers_estimate: beta_astar.map(|b| set.contains(b)).unwrap_or(true),
        })
    }

    /// Runs all replications (in parallel, deterministic aggregation order).
    pub fn run(&self) -> Result<(McReport, Vec<RepOutcome>)> {
        let r = self.config.replications;
        let beta0 = self
            .config
            .beta0
            .unwrap_or_else(|| self.config.dgp.true_beta());
        let results: Vec<Result<RepOutcome>> =
            (0..r).into_par_iter().map(|rep| self.run_rep(rep, beta0)).collect();
        let mut outcomes = Vec::with_capacity(r);
        let mut failures = 0usize;
        for res in results {
            match res {
                Ok(o) => outcomes.push(o),
                Err(_) => failures += 1,
            }
        }
        if (failures as f64) > MC_FAILURE_SHARE * r as f64 {
            return Err(Error::SimulationAborted {
                failed: failures,
                total: r,
            });
        }
        let true_beta = self.config.dgp.true_beta();
        let bias_astar: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.beta_astar.map(|b| b - true_beta))
            .collect();
        let bias_ls: Vec<f64> = outcomes.iter().map(|o| o.beta_ls - true_beta).collect();
        let rejects: Vec<f64> = outcomes
            .iter()
            .map(|o| if o.ar_reject { 1.0 } else { 0.0 })
            .collect();
        let z: Vec<f64> = outcomes.iter().map(|o| o.z_beta0).collect();
        let vjk: Vec<f64> = outcomes.iter().map(|o| o.v_jackknife).collect();
        let gap: Vec<f64> = outcomes
            .iter()
            .map(|o| o.v_jackknife - o.z_beta0 * o.z_beta0)
            .collect();
        let mut kind_counts = KindCounts::default();
        for o in &outcomes {
            match o.set_kind {
                SetKind::BoundedInterval => kind_counts.bounded_interval += 1,
                SetKind::ComplementOfInterval => kind_counts.complement_of_interval += 1,
                SetKind::WholeLine => kind_counts.whole_line += 1,
            }
        }
        let degenerate = outcomes.iter().filter(|o| o.beta_astar.is_none()).count();
        let covers_estimate: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.beta_astar.is_some())
            .map(|o| if o.set_covers_estimate { 1.0 } else { 0.0 })
            .collect();
        let report = McReport {
            true_beta,
            beta0,
            replications: r,
            failures,
            degenerate_estimates: degenerate,
            mean_bias_astar: mean(&bias_astar),
            mc_se_bias_astar: batch_means_se(&bias_astar),
            mean_bias_ls: mean(&bias_ls),
            mc_se_bias_ls: batch_means_se(&bias_ls),
            ar_size: mean(&rejects),
            ar_size_se: batch_means_se(&rejects),
            set_coverage: mean(
                &outcomes
                    .iter()
                    .map(|o| if o.set_covers_truth { 1.0 } else { 0.0 })
                    .collect::<Vec<_>>(),
            ),
            set_covers_estimate_share: mean(&covers_estimate),
            kind_counts,
            mean_v_jackknife: mean(&vjk),
            var_z: population_var(&z),
            jackknife_gap_mean: mean(&gap),
            jackknife_gap_se: batch_means_se(&gap),
            mean_abs_vjk_minus_vcr: mean(
                &outcomes
                    .iter()
                    .map(|o| (o.v_jackknife - o.v_cluster_robust).abs())
                    .collect::<Vec<_>>(),
            ),
            centering: self.astar.diagnostics(),
            config: self.config.clone(),
        };
        Ok((report, outcomes))
    }
}

/// Convenience wrapper: build the engine and run.
pub fn run_monte_carlo(config: McConfig) -> Result<(McReport, Vec<RepOutcome>)> {
    McEngine::new(config)?.run()
}

/// Writes per-replication outcomes as CSV.
pub fn write_rep_csv<W: std::io::Write>(writer: W, outcomes: &[RepOutcome]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "rep",
        "beta_astar",
        "beta_ls",
        "z_beta0",
        "v_jackknife",
        "v_cluster_robust",
        "ar_reject",
        "set_kind",
        "set_covers_truth",
        "set_covers_estimate",
    ])?;
    for o in outcomes {
        let kind = match o.set_kind {
            SetKind::BoundedInterval => "bounded_interval",
            SetKind::ComplementOfInterval => "complement_of_interval",
            SetKind::WholeLine => "whole_line",
        };
        wtr.write_record([
            o.rep.to_string(),
            o.beta_astar.map_or(String::new(), |b| format!("{b:.17e}")),
            format!("{:.17e}", o.beta_ls),
            format!("{:.17e}", o.z_beta0),
            format!("{:.17e}", o.v_jackknife),
            format!("{:.17e}", o.v_cluster_robust),
            (o.ar_reject as u8).to_string(),
            kind.to_string(),
            (o.set_covers_truth as u8).to_string(),
            (o.set_covers_estimate as u8).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Distribution experiments
// ---------------------------------------------------------------------------

/// Kolmogorov-Smirnov distance between a sample and the standard normal.
pub fn ks_statistic_standard_normal(sample: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::standard();
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = normal.cdf(x);
            let hi = (i as f64 + 1.0) / n - cdf;
            let lo = cdf - i as f64 / n;
            hi.max(lo)
        })
        .fold(0.0, f64::max)
}

/// Report of the hollow-quadratic central limit experiment.
#[derive(Debug, Clone, Serialize)]
pub struct QuadraticCltReport {
    pub replications: usize,
    pub mean: f64,
    pub var_mc: f64,
    /// `2 ||Gamma||_F^2`.
    pub var_theory: f64,
    pub variance_ratio: f64,
    pub ks_statistic: f64,
}

/// Simulates `S = sum_{i != j} xi_i' Gamma_ij xi_j` for a random hollow
/// symmetric block matrix `Gamma` (`Gamma_ji = Gamma_ij'`, zero diagonal
/// blocks, entries scaled so no block dominates) and unit-variance iid
/// components, comparing the Monte Carlo variance and distribution against
/// the normal limit with variance `2 ||Gamma||_F^2`.
pub fn quadratic_clt_experiment(
    cluster_sizes: &[usize],
    distribution: ShockDistribution,
    replications: usize,
    seed: u64,
) -> Result<QuadraticCltReport> {
    if cluster_sizes.len() < 2 {
        return Err(Error::Config("need at least two clusters".into()));
    }
    let assignment: Vec<usize> = cluster_sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| std::iter::repeat_n(i, t))
        .collect();
    let partition = ClusterPartition::new(assignment)?;
    let n = partition.n();
    let nc = partition.num_clusters();
    // Deterministic Gamma from stream 0.
    let mut grng = ChaCha8Rng::seed_from_u64(seed);
    grng.set_stream(0);
    let mut gamma = DMatrix::zeros(n, n);
    let scale = 1.0 / (n as f64).sqrt();
    for i in 0..nc {
        for j in (i + 1)..nc {
            for &r in partition.members(i) {
                for &c in partition.members(j) {
                    let v: f64 = grng.sample::<f64, _>(StandardNormal);
                    gamma[(r, c)] = scale * v;
                    gamma[(c, r)] = scale * v;
                }
            }
        }
    }
    let var_theory = 2.0 * gamma.iter().map(|v| v * v).sum::<f64>();
    let draws: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64 + 1);
            let xi = DVector::from_fn(n, |_, _| draw_component(distribution, &mut rng));
            // Hollow diagonal blocks: the full quadratic form equals S.
            (xi.transpose() * &gamma * &xi)[0]
        })
        .collect();
    let var_mc = population_var(&draws);
    let sd = var_theory.sqrt();
    let standardized: Vec<f64> = draws.iter().map(|s| s / sd).collect();
    Ok(QuadraticCltReport {
        replications,
        mean: mean(&draws),
        var_mc,
        var_theory,
        variance_ratio: var_mc / var_theory,
        ks_statistic: ks_statistic_standard_normal(&standardized),
    })
}

/// Report of the linear/quadratic decomposition experiment.
#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub replications: usize,
    /// Mean of `L * Q` (the two parts are orthogonal in expectation).
    pub cov_linear_quadratic: f64,
    pub cov_linear_quadratic_se: f64,
    /// Mean of the cross-cluster interaction term
    /// `sum_{i != j} (v_i' A_ij e_j)(v_j' A_ji e_i)` with its batch SE.
    pub correction_mean: f64,
    pub correction_se: f64,
    pub var_total: f64,
    pub var_linear: f64,
    pub var_quadratic: f64,
    /// Largest per-replication violation of `x'Ae = L + Q`.
    pub identity_max_error: f64,
    /// KS distance of the studentized numerator from the standard normal.
    pub ks_statistic: f64,
}

/// Decomposes the numerator `x' A e` into its cluster-linear part
/// `L = sum_j ((A'lambda)_j + A_jj' v_j) . e_j` and cross-cluster quadratic
/// part `Q = sum_j sum_{i != j} (v_i' A_ij) . e_j`, and measures the
/// cross-cluster interaction term that makes the jackknife conservative.
pub fn decomposition_experiment(
    engine: &McEngine,
    replications: usize,
) -> Result<DecompositionReport> {
    let a = &engine.astar;
    let partition = &engine.design.partition;
    let nc = partition.num_clusters();
    let rows: Vec<(f64, f64, f64, f64, f64)> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let g = engine.generate(rep);
            let v = &g.x - &g.lambda;
            let e = &g.shocks;
            let numer = a.quadratic_form(&g.x, e);
            let at_lambda = a.apply_transpose(&g.lambda);
            // Linear part.
            let mut linear = at_lambda.dot(e);
            for i in 0..nc {
                if let Some(block) = a.block(i, i) {
                    let members = partition.members(i);
                    for (p, &r) in members.iter().enumerate() {
                        for (q, &c) in members.iter().enumerate() {
                            linear += v[r] * block[(p, q)] * e[c];
                        }
                    }
                }
            }
            // Quadratic part and the cross-block interaction.
            let mut quad = 0.0;
            let mut sij: HashMap<(usize, usize), f64> = HashMap::new();
            for (bi, bj, block) in a.iter_blocks() {
                if bi == bj {
                    continue;
                }
                let rows_m = partition.members(bi);
                let cols_m = partition.members(bj);
                let mut s = 0.0;
                for (p, &r) in rows_m.iter().enumerate() {
                    for (q, &c) in cols_m.iter().enumerate() {
                        s += v[r] * block[(p, q)] * e[c];
                    }
                }
                quad += s;
                sij.insert((bi, bj), s);
            }
            let mut correction = 0.0;
            for (&(i, j), &s) in &sij {
                if let Some(&s_rev) = sij.get(&(j, i)) {
                    if i < j {
                        correction += 2.0 * s * s_rev;
                    }
                }
            }
            let identity_err = (numer - linear - quad).abs();
            (numer, linear, quad, correction, identity_err)
        })
        .collect();
    let numer: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let linear: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let quad: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let lq: Vec<f64> = rows.iter().map(|r| r.1 * r.2).collect();
    let corr: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let identity_max_error = rows.iter().map(|r| r.4).fold(0.0, f64::max);
    let sd = population_var(&numer).sqrt();
    let standardized: Vec<f64> = numer.iter().map(|z| z / sd).collect();
    Ok(DecompositionReport {
        replications,
        cov_linear_quadratic: mean(&lq),
        cov_linear_quadratic_se: batch_means_se(&lq),
        correction_mean: mean(&corr),
        correction_se: batch_means_se(&corr),
        var_total: population_var(&numer),
        var_linear: population_var(&linear),
        var_quadratic: population_var(&quad),
        identity_max_error,
        ks_statistic: ks_statistic_standard_normal(&standardized),
    })
}

/// The three negligibility ratios controlling the normal approximation: all
/// must vanish as the design grows for the limit to apply.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NegligibilityRatios {
    /// `max_i ||Sigma_i||^2 T_i / n`.
    pub sigma_sq_size_over_n: f64,
    /// `(max_i T_i)^3 ||Sigma|| ||M||_inf^2 / n`.
    pub size_cubed_sigma_minf_over_n: f64,
    /// `max_i ||Sigma_i||^2 (max_i T_i)^2 / n`.
    pub sigma_sq_size_sq_over_n: f64,
}

/// Computes the negligibility ratios for a shock model on a partition.
pub fn negligibility_ratios(
    partition: &ClusterPartition,
    shocks: &ShockModel,
    projection: &ProjectionMatrix,
) -> NegligibilityRatios {
    let n = partition.n() as f64;
    let mut max_norm: f64 = 0.0;
    let mut max_norm_size: f64 = 0.0;
    let mut max_t: f64 = 0.0;
    for size in partition.sizes() {
        let norm = shocks.covariance_operator_norm(size);
        max_norm = max_norm.max(norm);
        max_norm_size = max_norm_size.max(norm * norm * size as f64);
        max_t = max_t.max(size as f64);
    }
    let m_inf = projection.infinity_norm();
    NegligibilityRatios {
        sigma_sq_size_over_n: max_norm_size / n,
        size_cubed_sigma_minf_over_n: max_t.powi(3) * max_norm * m_inf * m_inf / n,
        sigma_sq_size_sq_over_n: max_norm * max_norm * max_t * max_t / n,
    }
}
