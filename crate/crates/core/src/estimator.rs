//! Point estimation with a recombination matrix.
//!
//! Given data `(y, x, W)` and a centering matrix `A`, the estimator is the
//! ratio of quadratic forms `beta_hat = x'Ay / x'Ax`. With `A = M` this is
//! exactly the least-squares coefficient after residualizing on the
//! controls; with `A = A*` the recombination uses only pairs declared
//! uncorrelated by the exclusion matrix, removing the within-cluster
//! endogeneity bias of least squares.

use nalgebra::DVector;
use serde::Serialize;

use crate::centering::{CenteringMatrix, CenteringMode};
use crate::error::Error;
use crate::exclusion::ClusterPartition;
use crate::projections::{ControlMatrix, ProjectionMatrix};
use crate::Result;

/// Relative floor under which `x'Ax` is treated as numerically zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-10;

/// Fraction of `trace(A) * var(x)` under which identification is flagged
/// weak.
pub const WEAK_DENOMINATOR_FRACTION: f64 = 0.1;

/// A clustered regression dataset with a single regressor of interest.
#[derive(Debug, Clone)]
pub struct ClusteredDataset {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    pub controls: ControlMatrix,
    pub partition: ClusterPartition,
}

impl ClusteredDataset {
    /// Validates matching dimensions.
    pub fn new(
        y: DVector<f64>,
        x: DVector<f64>,
        controls: ControlMatrix,
        partition: ClusterPartition,
    ) -> Result<Self> {
        let n = partition.n();
        if y.len() != n || x.len() != n || controls.n() != n {
            return Err(Error::Invalid(format!(
                "inconsistent dimensions: y = {}, x = {}, controls = {}, partition = {n}",
                y.len(),
                x.len(),
                controls.n()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("y and x must be finite".into()));
        }
        Ok(Self {
            y,
            x,
            controls,
            partition,
        })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.partition.n()
    }
}

/// A point estimate with its quadratic-form components.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub beta: f64,
    /// `x' A y`.
    pub numerator: f64,
    /// `x' A x`.
    pub denominator: f64,
    /// Set when `|x'Ax|` is small relative to `trace(A) * var(x)`,
    /// indicating weak identification.
    pub weak_denominator: bool,
}

fn population_variance(v: &DVector<f64>) -> f64 {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    v.iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / n
}

/// `beta_hat = x'Ay / x'Ax`.
///
/// Errors with [`Error::DegenerateDenominator`] when `|x'Ax|` falls below
/// `DENOMINATOR_FLOOR * n * var(x)`.
pub fn estimate(data: &ClusteredDataset, a: &CenteringMatrix) -> Result<Estimate> {
    if a.n() != data.n() {
        return Err(Error::Invalid(format!(
            "centering matrix has {} observations, data has {}",
            a.n(),
            data.n()
        )));
    }
    let numerator = a.quadratic_form(&data.x, &data.y);
    let denominator = a.quadratic_form(&data.x, &data.x);
    let var_x = population_variance(&data.x);
    let floor = DENOMINATOR_FLOOR * data.n() as f64 * var_x;
    if denominator.abs() <= floor {
        return Err(Error::DegenerateDenominator {
            value: denominator,
            floor,
        });
    }
    let weak = denominator.abs() < WEAK_DENOMINATOR_FRACTION * a.trace() * var_x;
    Ok(Estimate {
        beta: numerator / denominator,
        numerator,
        denominator,
        weak_denominator: weak,
    })
}

/// The instrumental-variable form of the same estimator.
///
/// The implied instrument is `z = A'x`. In outcome mode (`A M = A`) the
/// two-stage formula `z'My / z'Mx` is algebraically identical to
/// `x'Ay / x'Ax`; this routine evaluates it through the annihilator as an
/// independent computational route. In design mode the instrument is already
/// centered (`z'W = x'AW` need not vanish, but `x'Ay = z'y` by definition),
/// so the plain IV ratio `z'y / z'x` is used.
pub fn estimate_iv_form(
    data: &ClusteredDataset,
    a: &CenteringMatrix,
    proj: &ProjectionMatrix,
) -> Result<Estimate> {
    if a.n() != data.n() || proj.n() != data.n() {
        return Err(Error::Invalid(
            "dimension mismatch between data, centering, and projection".into(),
        ));
    }
    let z = a.apply_transpose(&data.x);
    let (numerator, denominator) = match a.mode() {
        CenteringMode::Outcome => {
            let my = proj.residualize(&data.y);
            let mx = proj.residualize(&data.x);
            (z.dot(&my), z.dot(&mx))
        }
        CenteringMode::Design => (z.dot(&data.y), z.dot(&data.x)),
    };
    let var_x = population_variance(&data.x);
    let floor = DENOMINATOR_FLOOR * data.n() as f64 * var_x;
    if denominator.abs() <= floor {
        return Err(Error::DegenerateDenominator {
            value: denominator,
            floor,
        });
    }
    let weak = denominator.abs() < WEAK_DENOMINATOR_FRACTION * a.trace() * var_x;
    Ok(Estimate {
        beta: numerator / denominator,
        numerator,
        denominator,
        weak_denominator: weak,
    })
}

/// First-order bias of the least-squares estimator when regressor/error
/// cross-moments do not vanish:
///
/// `bias = (1/n) * sum over within-cluster pairs of M[l~, l] * E[x_l~ e_l],
///  divided by q`,
///
/// where `q` approximates `x'Mx / n`. Cross-cluster moments are zero by
/// independence, so only within-cluster pairs are visited.
pub fn nickell_bias_plugin(
    proj: &ProjectionMatrix,
    partition: &ClusterPartition,
    cross_moment: impl Fn(usize, usize) -> f64,
    q: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..partition.num_clusters() {
        let members = partition.members(i);
        for &r in members {
            for &c in members {
                let cm = cross_moment(r, c);
                if cm != 0.0 {
                    acc += proj.entry(r, c) * cm;
                }
            }
        }
    }
    acc / (partition.n() as f64) / q
}

/// Cross-moments `E[x_l~ e_l]` for the stationary first-order
/// autoregressive panel `y_it = alpha_i + beta * y_{i,t-1} + e_it` with
/// regressor `x_it = y_{i,t-1}` and error variance `sigma2`:
/// `E[y_{i,s-1} e_it] = beta^(s-1-t) * sigma2` for `s > t`, zero otherwise.
pub fn ar1_cross_moment(times: &[i64], beta: f64, sigma2: f64) -> impl Fn(usize, usize) -> f64 + '_ {
    move |r: usize, c: usize| {
        let gap = times[r] - times[c];
        if gap >= 1 {
            beta.powi((gap - 1) as i32) * sigma2
        } else {
            0.0
        }
    }
}

/// Exact per-observation within variance `E[x'Mx] / n` for the stationary
/// AR(1) panel with cluster fixed effects and `t_periods` periods per
/// cluster: with `s2 = sigma2 / (1 - beta^2)`,
///
/// `q = (s2 / T) * ((T - 1) - (2 / T) * sum_{h=1}^{T-1} (T - h) beta^h)`.
pub fn ar1_panel_q(beta: f64, sigma2: f64, t_periods: usize) -> f64 {
    assert!(beta.abs() < 1.0, "stationary start requires |beta| < 1");
    let t = t_periods as f64;
    let s2 = sigma2 / (1.0 - beta * beta);
    let mut corr = 0.0;
    for h in 1..t_periods {
        corr += (t - h as f64) * beta.powi(h as i32);
    }
    (s2 / t) * ((t - 1.0) - 2.0 / t * corr)
}
