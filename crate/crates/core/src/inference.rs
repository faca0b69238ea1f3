//! Cluster-jackknife variance and weak-identification-robust inference.
//!
//! All inference is built on the numerator statistic `Z(b0) = x' A (y - x b0)`
//! and its per-cluster jackknife deltas `Z - Z_(i)`, where `Z_(i)` re-evaluates
//! the statistic with cluster `i`'s regressors and residuals zeroed out. The
//! jackknife variance `sum_i (Z - Z_(i))^2` is unbiased for `Var(Z)` when `A`
//! is cluster-block-diagonal and conservative (upward-biased by squared-mean
//! and cross-cluster variance terms) otherwise.
//!
//! The score test `AR(b0) = Z(b0)^2 / Var_hat(b0)` is compared to a
//! chi-squared(1) critical value; because both `Z` and each delta are affine
//! in `b0`, the acceptance region inverts to a quadratic inequality whose
//! solution set is a bounded interval, the complement of an interval, or the
//! whole real line — the latter two arising under weak identification.

use nalgebra::DVector;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::centering::{CenteringDiagnostics, CenteringMatrix};
use crate::error::Error;
use crate::estimator::{estimate, ClusteredDataset, Estimate};
use crate::Result;

/// Relative threshold under which the quadratic's leading coefficient is
/// treated as zero during confidence-set inversion.
pub const INVERSION_DEGENERACY_RTOL: f64 = 1e-12;

/// The numerator statistic and its per-cluster jackknife deltas.
#[derive(Debug, Clone)]
pub struct NumeratorStat {
    /// `Z = x' A (y - x b0)`.
    pub total: f64,
    /// `Z - Z_(i)` for each cluster `i`.
    pub deltas: Vec<f64>,
}

/// Computes `Z(b0)` and its deltas.
///
/// Each delta is the exact effect of zeroing cluster `i` in both the
/// regressor and the residual: by bilinearity,
/// `Z - Z_(i) = sum_{l in i} (x_l (AU)_l + (A'x)_l U_l) - x_i' A_ii U_i`,
/// which evaluates the definitional re-computation without an `O(n^2)` pass
/// per cluster.
pub fn numerator_stat(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    beta0: f64,
) -> Result<NumeratorStat> {
    if a.n() != data.n() {
        return Err(Error::Invalid(format!(
            "centering matrix has {} observations, data has {}",
            a.n(),
            data.n()
        )));
    }
    let u = &data.y - &data.x * beta0;
    Ok(numerator_stat_with_residual(data, a, &u))
}

/// [`numerator_stat`] for a caller-supplied residual vector `u`.
pub(crate) fn numerator_stat_with_residual(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    u: &DVector<f64>,
) -> NumeratorStat {
    let partition = &data.partition;
    let au = a.apply(u);
    let atx = a.apply_transpose(&data.x);
    let total = data.x.dot(&au);
    let mut deltas = vec![0.0f64; partition.num_clusters()];
    for (i, delta) in deltas.iter_mut().enumerate() {
        let mut d = 0.0;
        for &l in partition.members(i) {
            d += data.x[l] * au[l] + atx[l] * u[l];
        }
        if let Some(block) = a.block(i, i) {
            let members = partition.members(i);
            for (p, &r) in members.iter().enumerate() {
                for (q, &c) in members.iter().enumerate() {
                    d -= data.x[r] * block[(p, q)] * u[c];
                }
            }
        }
        *delta = d;
    }
    NumeratorStat { total, deltas }
}

/// Cluster-jackknife variance estimate `sum_i (Z - Z_(i))^2`.
pub fn jackknife_variance(stat: &NumeratorStat) -> f64 {
    stat.deltas.iter().map(|d| d * d).sum()
}

/// Classical cluster-robust variance: `sum_i (x_i' (A U)_i)^2`, treating the
/// rows of `A U` as scores. Coincides with the jackknife exactly when `A` is
/// cluster-block-diagonal.
pub fn cluster_robust_variance(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    beta0: f64,
) -> Result<f64> {
    if a.n() != data.n() {
        return Err(Error::Invalid("dimension mismatch".into()));
    }
    let u = &data.y - &data.x * beta0;
    let au = a.apply(&u);
    let mut total = 0.0;
    for i in 0..data.partition.num_clusters() {
        let score: f64 = data
            .partition
            .members(i)
            .iter()
            .map(|&l| data.x[l] * au[l])
            .sum();
        total += score * score;
    }
    Ok(total)
}

/// Result of the score test at a hypothesized coefficient.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ArTest {
    pub beta0: f64,
    /// `Z(b0)^2 / Var_hat(b0)`.
    pub statistic: f64,
    /// Chi-squared(1) critical value at the requested level.
    pub critical: f64,
    pub p_value: f64,
    pub reject: bool,
    pub variance: f64,
}

/// Score test of `beta = beta0` at significance level `alpha`.
///
/// Degenerate variance is resolved by convention: when `Var_hat = 0` the
/// statistic is 0 if `Z = 0` (nothing to reject) and `+inf` otherwise.
pub fn ar_test(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    beta0: f64,
    alpha: f64,
) -> Result<ArTest> {
    check_alpha(alpha)?;
    let stat = numerator_stat(data, a, beta0)?;
    let variance = jackknife_variance(&stat);
    let statistic = if variance == 0.0 {
        if stat.total == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        stat.total * stat.total / variance
    };
    let chi = ChiSquared::new(1.0).expect("chi-squared(1)");
    let critical = chi.inverse_cdf(1.0 - alpha);
    let p_value = if statistic.is_infinite() {
        0.0
    } else {
        1.0 - chi.cdf(statistic)
    };
    Ok(ArTest {
        beta0,
        statistic,
        critical,
        p_value,
        reject: statistic > critical,
        variance,
    })
}

/// Shape of an inverted confidence set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    /// `[lo, hi]`.
    BoundedInterval,
    /// `(-inf, lo] union [hi, +inf)`; an endpoint may be infinite, leaving a
    /// half-line.
    ComplementOfInterval,
    /// All of `R`: the data are uninformative at this level.
    WholeLine,
}

/// A confidence set for the structural coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet {
    pub kind: SetKind,
    /// 0 or 2 endpoints; see [`SetKind`]. An empty endpoint list with
    /// `BoundedInterval` encodes the (numerically degenerate) empty set.
    pub endpoints: Vec<f64>,
    pub level: f64,
}

impl ConfidenceSet {
    /// Membership test.
    pub fn contains(&self, beta: f64) -> bool {
        match self.kind {
            SetKind::WholeLine => true,
            SetKind::BoundedInterval => {
                self.endpoints.len() == 2 && beta >= self.endpoints[0] && beta <= self.endpoints[1]
            }
            SetKind::ComplementOfInterval => {
                self.endpoints.len() == 2
                    && (beta <= self.endpoints[0] || beta >= self.endpoints[1])
            }
        }
    }
}

/// Inverts the score test over all `beta0`, solving
/// `(a - b*beta)^2 - q * sum_i (c_i - d_i*beta)^2 <= 0` in closed form.
///
/// `a = x'Ay` and `b = x'Ax` with deltas `c_i` (residual `y`) and `d_i`
/// (residual `x`), all affine in `beta0` by bilinearity. The set kind follows
/// the sign of the leading coefficient `b^2 - q sum d_i^2` — negative values
/// signal weak identification (unbounded sets).
pub fn invert_ar(data: &ClusteredDataset, a: &CenteringMatrix, alpha: f64) -> Result<ConfidenceSet> {
    check_alpha(alpha)?;
    let level = 1.0 - alpha;
    let stat_y = numerator_stat_with_residual(data, a, &data.y);
    let stat_x = numerator_stat_with_residual(data, a, &data.x);
    let (a0, b0) = (stat_y.total, stat_x.total);
    let q = ChiSquared::new(1.0)
        .expect("chi-squared(1)")
        .inverse_cdf(1.0 - alpha);
    let (mut scc, mut scd, mut sdd) = (0.0f64, 0.0f64, 0.0f64);
    for (c, d) in stat_y.deltas.iter().zip(&stat_x.deltas) {
        scc += c * c;
        scd += c * d;
        sdd += d * d;
    }
    let a2 = b0 * b0 - q * sdd;
    let a1 = 2.0 * (q * scd - a0 * b0);
    let a0c = a0 * a0 - q * scc;
    let scale = (a0 * a0).max(b0 * b0).max(q * scc).max(q * sdd);
    let threshold = INVERSION_DEGENERACY_RTOL * scale;

    let set = if a2.abs() <= threshold {
        // Degenerate leading coefficient: linear inequality a1*beta + a0c <= 0.
        if a1.abs() <= threshold {
            if a0c <= 0.0 {
                ConfidenceSet {
                    kind: SetKind::WholeLine,
                    endpoints: vec![],
                    level,
                }
            } else {
                // Numerically empty set.
                ConfidenceSet {
                    kind: SetKind::BoundedInterval,
                    endpoints: vec![],
                    level,
                }
            }
        } else {
            let root = -a0c / a1;
            if a1 > 0.0 {
                // beta <= root: a half-line, encoded as a complement with an
                // infinite endpoint.
                ConfidenceSet {
                    kind: SetKind::ComplementOfInterval,
                    endpoints: vec![root, f64::INFINITY],
                    level,
                }
            } else {
                ConfidenceSet {
                    kind: SetKind::ComplementOfInterval,
                    endpoints: vec![f64::NEG_INFINITY, root],
                    level,
                }
            }
        }
    } else {
        let disc = a1 * a1 - 4.0 * a2 * a0c;
        let disc_threshold = INVERSION_DEGENERACY_RTOL * (a1 * a1 + 4.0 * (a2 * a0c).abs());
        if a2 > 0.0 {
            // Opens upward; the set contains the point estimate, so the
            // discriminant is nonnegative up to roundoff. The endpoints are
            // padded at roundoff scale so the reported closed interval covers
            // every non-rejected point despite root-finding error.
            let droot = disc.max(0.0).sqrt();
            let (lo, hi) = quadratic_roots(a2, a1, droot);
            let pad = INVERSION_DEGENERACY_RTOL * (1.0 + lo.abs().max(hi.abs()));
            ConfidenceSet {
                kind: SetKind::BoundedInterval,
                endpoints: vec![lo - pad, hi + pad],
                level,
            }
        } else if disc <= disc_threshold {
            // No real crossing (or a tangency indistinguishable from one
            // at roundoff scale): the downward parabola never rises above
            // zero, so nothing is rejected.
            ConfidenceSet {
                kind: SetKind::WholeLine,
                endpoints: vec![],
                level,
            }
        } else {
            let droot = disc.sqrt();
            let (lo, hi) = quadratic_roots(a2, a1, droot);
            ConfidenceSet {
                kind: SetKind::ComplementOfInterval,
                endpoints: vec![lo, hi],
                level,
            }
        }
    };
    Ok(set)
}

/// Roots of `a2 x^2 + a1 x + c`, given `droot = sqrt(discriminant)`,
/// returned in ascending order using the numerically stable split.
fn quadratic_roots(a2: f64, a1: f64, droot: f64) -> (f64, f64) {
    let qterm = -0.5 * (a1 + a1.signum() * droot);
    let r1 = qterm / a2;
    let r2 = if qterm != 0.0 {
        // c / qterm, with c recovered from Vieta: r1 * r2 = c / a2.
        (a1 * a1 - droot * droot) / (4.0 * a2 * qterm)
    } else {
        -a1 / (2.0 * a2) // double root at the vertex
    };
    if r1 <= r2 {
        (r1, r2)
    } else {
        (r2, r1)
    }
}

/// Symmetric normal-approximation interval for the point estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TInterval {
    pub beta: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// `beta_hat +- z_{1-alpha/2} * sqrt(V_jk(beta_hat)) / |x'Ax|`.
pub fn t_interval(data: &ClusteredDataset, a: &CenteringMatrix, alpha: f64) -> Result<TInterval> {
    check_alpha(alpha)?;
    let est = estimate(data, a)?;
    let stat = numerator_stat(data, a, est.beta)?;
    let v = jackknife_variance(&stat);
    let se = v.sqrt() / est.denominator.abs();
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    Ok(TInterval {
        beta: est.beta,
        se,
        lo: est.beta - z * se,
        hi: est.beta + z * se,
        level: 1.0 - alpha,
    })
}

/// Evaluates the score statistic along a grid of hypothesized coefficients.
pub fn ar_curve(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    grid: &[f64],
    alpha: f64,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(grid.len());
    for &b in grid {
        let t = ar_test(data, a, b, alpha)?;
        out.push((b, t.statistic));
    }
    Ok(out)
}

/// Default evaluation grid: `points` values spanning
/// `beta_hat +- width_se * se`.
pub fn default_grid(center: f64, se: f64, width_se: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2);
    let half = width_se * se;
    let (lo, hi) = (center - half, center + half);
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Full inference summary for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct InferenceReport {
    pub estimate: Estimate,
    pub t_interval: TInterval,
    pub jackknife_variance: f64,
    pub cluster_robust_variance: f64,
    pub ar_set: ConfidenceSet,
    pub alpha: f64,
    pub centering: CenteringDiagnostics,
}

/// Runs the full inference pipeline at level `alpha`.
pub fn build_report(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    alpha: f64,
) -> Result<InferenceReport> {
    let est = estimate(data, a)?;
    let ti = t_interval(data, a, alpha)?;
    let stat = numerator_stat(data, a, est.beta)?;
    Ok(InferenceReport {
        estimate: est,
        t_interval: ti,
        jackknife_variance: jackknife_variance(&stat),
        cluster_robust_variance: cluster_robust_variance(data, a, est.beta)?,
        ar_set: invert_ar(data, a, alpha)?,
        alpha,
        centering: a.diagnostics(),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!(
            "significance level must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centering::{build_astar, CenteringMethod, CenteringMode};
    use crate::exclusion::{ClusterPartition, ExclusionMatrix, ExclusionRecipe};
    use crate::projections::{build_projection, ControlMatrix};
    use approx::assert_relative_eq;

    fn panel_fixture() -> (ClusteredDataset, CenteringMatrix) {
        let partition = ClusterPartition::balanced(3, 3).unwrap();
        let controls =
            ControlMatrix::group_indicators(partition.assignment().to_vec()).unwrap();
        let proj = build_projection(controls.clone()).unwrap();
        let times: Vec<i64> = (0..9).map(|l| (l % 3 + 1) as i64).collect();
        let excl = ExclusionMatrix::from_recipe(
            partition.clone(),
            &ExclusionRecipe::WeakExogeneity,
            Some(&times),
            None,
        )
        .unwrap();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        let y = DVector::from_row_slice(&[0.4, 1.2, -0.3, 2.0, 0.8, 1.5, -1.0, 0.2, 0.9]);
        let x = DVector::from_row_slice(&[1.0, -0.5, 0.3, 0.8, 1.4, -1.1, 0.6, -0.2, 1.9]);
        let data = ClusteredDataset::new(y, x, controls, partition).unwrap();
        (data, a)
    }

    /// Re-evaluates Z with cluster i literally zeroed out of x and u.
    fn brute_force_deltas(data: &ClusteredDataset, a: &CenteringMatrix, beta0: f64) -> Vec<f64> {
        let u = &data.y - &data.x * beta0;
        let total = a.quadratic_form(&data.x, &u);
        (0..data.partition.num_clusters())
            .map(|i| {
                let mut xi = data.x.clone();
                let mut ui = u.clone();
                for &l in data.partition.members(i) {
                    xi[l] = 0.0;
                    ui[l] = 0.0;
                }
                total - a.quadratic_form(&xi, &ui)
            })
            .collect()
    }

    /// Expanded form: sum over off-cluster rows/columns plus the own block
    /// counted once.
    fn expansion_deltas(data: &ClusteredDataset, a: &CenteringMatrix, beta0: f64) -> Vec<f64> {
        let u = &data.y - &data.x * beta0;
        let p = &data.partition;
        let mut deltas = vec![0.0f64; p.num_clusters()];
        for (bi, bj, block) in a.iter_blocks() {
            let rows = p.members(bi);
            let cols = p.members(bj);
            for (ri, &r) in rows.iter().enumerate() {
                for (cj, &c) in cols.iter().enumerate() {
                    let term = data.x[r] * block[(ri, cj)] * u[c];
                    if bi == bj {
                        deltas[bi] += term;
                    } else {
                        deltas[bj] += term; // x_j' A_ji U_i with i = bj
                        deltas[bi] += term; // x_i' A_ij U_j with i = bi
                    }
                }
            }
        }
        deltas
    }

    #[test]
    fn deltas_match_brute_force_zeroing_and_expansion() {
        let (data, a) = panel_fixture();
        for beta0 in [0.0, 0.7, -1.3] {
            let stat = numerator_stat(&data, &a, beta0).unwrap();
            let brute = brute_force_deltas(&data, &a, beta0);
            let expanded = expansion_deltas(&data, &a, beta0);
            for i in 0..stat.deltas.len() {
                assert_relative_eq!(stat.deltas[i], brute[i], epsilon = 1e-10);
                assert_relative_eq!(stat.deltas[i], expanded[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn block_diagonal_deltas_sum_to_total() {
        let (data, a) = panel_fixture();
        assert!(a.is_block_diagonal());
        let stat = numerator_stat(&data, &a, 0.4).unwrap();
        let sum: f64 = stat.deltas.iter().sum();
        assert_relative_eq!(sum, stat.total, epsilon = 1e-10);
    }

    #[test]
    fn cluster_robust_equals_jackknife_when_block_diagonal() {
        let (data, a) = panel_fixture();
        let stat = numerator_stat(&data, &a, 0.25).unwrap();
        let vjk = jackknife_variance(&stat);
        let vcr = cluster_robust_variance(&data, &a, 0.25).unwrap();
        assert_relative_eq!(vjk, vcr, max_relative = 1e-12);
    }

    #[test]
    fn ar_set_contains_point_estimate() {
        let (data, a) = panel_fixture();
        let est = estimate(&data, &a).unwrap();
        let set = invert_ar(&data, &a, 0.05).unwrap();
        assert!(set.contains(est.beta));
        // The bounded set endpoints satisfy AR(endpoint) = critical value.
        if set.kind == SetKind::BoundedInterval {
            for &e in &set.endpoints {
                let t = ar_test(&data, &a, e, 0.05).unwrap();
                assert_relative_eq!(t.statistic, t.critical, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn ar_inversion_matches_pointwise_testing() {
        let (data, a) = panel_fixture();
        let set = invert_ar(&data, &a, 0.05).unwrap();
        let est = estimate(&data, &a).unwrap();
        let stat = numerator_stat(&data, &a, est.beta).unwrap();
        let se = jackknife_variance(&stat).sqrt() / est.denominator.abs();
        for b in default_grid(est.beta, se, 12.0, 101) {
            let t = ar_test(&data, &a, b, 0.05).unwrap();
            assert_eq!(
                set.contains(b),
                !t.reject,
                "grid point {b}: set membership must match test acceptance"
            );
        }
    }

    #[test]
    fn zero_variance_conventions() {
        // A* = 0 from contemporaneous-only exclusion: Z = 0 and V = 0, so the
        // statistic is 0 by convention (nothing to reject).
        let partition = ClusterPartition::balanced(2, 2).unwrap();
        let controls =
            ControlMatrix::group_indicators(partition.assignment().to_vec()).unwrap();
        let proj = build_projection(controls.clone()).unwrap();
        let excl = ExclusionMatrix::from_recipe(
            partition.clone(),
            &ExclusionRecipe::Contemporaneous,
            None,
            None,
        )
        .unwrap();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        let data = ClusteredDataset::new(
            DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]),
            DVector::from_row_slice(&[1.0, -1.0, 2.0, 0.5]),
            controls,
            partition,
        )
        .unwrap();
        let t = ar_test(&data, &a, 0.3, 0.05).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!(!t.reject);
        assert_eq!(t.variance, 0.0);
    }

    #[test]
    fn t_interval_brackets_estimate() {
        let (data, a) = panel_fixture();
        let ti = t_interval(&data, &a, 0.05).unwrap();
        assert!(ti.lo < ti.beta && ti.beta < ti.hi);
        assert!(ti.se > 0.0);
        // 95% normal quantile.
        assert_relative_eq!((ti.hi - ti.beta) / ti.se, 1.959964, epsilon = 1e-5);
    }

    #[test]
    fn report_serializes_to_json() {
        let (data, a) = panel_fixture();
        let report = build_report(&data, &a, 0.05).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"ar_set\""));
        assert!(json.contains("\"kind\""));
        // Kinds serialize in snake case.
        assert!(
            json.contains("bounded_interval")
                || json.contains("complement_of_interval")
                || json.contains("whole_line")
        );
    }

    #[test]
    fn invalid_alpha_rejected() {
        let (data, a) = panel_fixture();
        assert!(ar_test(&data, &a, 0.0, 0.0).is_err());
        assert!(invert_ar(&data, &a, 1.0).is_err());
    }
}
