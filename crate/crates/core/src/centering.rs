//! Construction of the correctly-centered recombination matrix `A*`.
//!
//! `A*` is the Frobenius-closest matrix to the annihilator `M` within the
//! class of matrices that (a) annihilate the controls on the required side
//! and (b) carry exact zeros at every excluded pair:
//!
//! - outcome mode: `A W = 0` (equivalently `A M = A`), so control
//!   misspecification in the outcome equation cannot leak into the estimate;
//! - design mode:  `W' A = 0` (equivalently `M A = A`), the transposed
//!   requirement, appropriate when the regressor equation carries the
//!   controls.
//!
//! Three constructions are implemented and cross-checked:
//!
//! 1. `LeaveOut` (production): row `l` of `A*` is the leave-out projection
//!    row of `M` computed after dropping the observations excluded in row
//!    `l`, with excluded entries exactly zero.
//! 2. `BlockB` (differential): `A* = (I - B) M` where row `l` of `B` solves a
//!    small linear system in the excluded submatrix of `M`.
//! 3. `VecOracle` (exact reference, size-guarded): the vectorized projection
//!    `vec(A*) = vec(M) - L' (L L')^+ L vec(M)` where `L` stacks one selector
//!    row per excluded pair plus the annihilation constraints.
//!
//! Storage is block-sparse by cluster pair: fixed-effect designs produce
//! block-diagonal `A*`, and all downstream quadratic forms exploit that.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::exclusion::{ClusterPartition, ExclusionMatrix};
use crate::projections::{pseudoinverse, ControlMatrix, ProjectionMatrix, SparseRow};
use crate::Result;

/// Upper size limit for the exact vectorized construction.
pub const ORACLE_SIZE_LIMIT: usize = 200;

/// Which side of `A` must annihilate the controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMode {
    /// `A W = 0`: robust to outcome-equation control misspecification.
    Outcome,
    /// `W' A = 0`: robust to design-equation control misspecification.
    Design,
}

/// Construction algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMethod {
    /// Per-row leave-out projection (production default).
    LeaveOut,
    /// `(I - B) M` with per-row excluded-block corrections.
    BlockB,
    /// Exact vectorized projection, guarded by [`ORACLE_SIZE_LIMIT`].
    VecOracle,
}

/// Block-sparse recombination matrix, blocks keyed by cluster pair.
#[derive(Debug, Clone)]
pub struct CenteringMatrix {
    n: usize,
    mode: CenteringMode,
    method: CenteringMethod,
    partition: ClusterPartition,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

/// Maximal constraint violations of the centering class.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClassViolations {
    /// `||A W||_F / ||W||_F` (outcome) or `||W' A||_F / ||W||_F` (design).
    pub annihilation: f64,
    /// `max |A[r, c]|` over excluded pairs.
    pub exclusion: f64,
}

/// Summary diagnostics of a centering matrix.
#[derive(Debug, Clone, Serialize)]
pub struct CenteringDiagnostics {
    pub n: usize,
    pub num_clusters: usize,
    pub mode: CenteringMode,
    pub method: CenteringMethod,
    /// `trace(A)`; equals `||A||_F^2` for a correctly built `A*`.
    pub trace: f64,
    pub frob_sq_total: f64,
    pub frob_sq_diag_blocks: f64,
    pub frob_sq_offdiag_blocks: f64,
    /// `||offdiag blocks||_F / ||diag blocks||_F`.
    pub offdiag_ratio: f64,
    /// Power-iteration estimate of the spectral norm.
    pub operator_norm_estimate: f64,
    pub per_cluster_trace: Vec<f64>,
    /// Partition concentration ratios `max_i T_i / n`, `max_i T_i^2 / n`,
    /// `max_i T_i^4 / n` used by the asymptotic negligibility checks.
    pub max_size_over_n: f64,
    pub max_size_sq_over_n: f64,
    pub max_size_fourth_over_n: f64,
}

impl CenteringMatrix {
    fn from_rows<I>(
        partition: &ClusterPartition,
        mode: CenteringMode,
        method: CenteringMethod,
        rows: I,
    ) -> Self
    where
        I: IntoIterator<Item = (usize, SparseRow)>,
    {
        let n = partition.n();
        let mut blocks: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for (r, row) in rows {
            let ci = partition.cluster_of(r);
            let ri = partition.within_index(r);
            for (&c, &v) in row.indices.iter().zip(&row.values) {
                if v == 0.0 {
                    continue;
                }
                let cj = partition.cluster_of(c);
                let block = blocks.entry((ci, cj)).or_insert_with(|| {
                    DMatrix::zeros(partition.members(ci).len(), partition.members(cj).len())
                });
                block[(ri, partition.within_index(c))] = v;
            }
        }
        Self {
            n,
            mode,
            method,
            partition: partition.clone(),
            blocks,
        }
    }

    /// Builds directly from a dense matrix (tests and the oracle path).
    fn from_dense(
        partition: &ClusterPartition,
        mode: CenteringMode,
        method: CenteringMethod,
        a: &DMatrix<f64>,
    ) -> Self {
        let n = partition.n();
        let rows = (0..n).map(|r| {
            let values: Vec<f64> = (0..n).map(|c| a[(r, c)]).collect();
            (
                r,
                SparseRow {
                    indices: (0..n).collect(),
                    values,
                },
            )
        });
        Self::from_rows(partition, mode, method, rows)
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.n
    }

    /// The centering mode.
    pub fn mode(&self) -> CenteringMode {
        self.mode
    }

    /// The construction method.
    pub fn method(&self) -> CenteringMethod {
        self.method
    }

    /// The cluster partition.
    pub fn partition(&self) -> &ClusterPartition {
        &self.partition
    }

    /// Number of stored (structurally nonzero) blocks.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// True when every stored block lies on the cluster diagonal.
    pub fn is_block_diagonal(&self) -> bool {
        self.blocks.keys().all(|&(i, j)| i == j)
    }

    /// The `(i, j)` cluster block, if structurally nonzero.
    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(i, j))
    }

    /// Iterates stored blocks as `(row_cluster, col_cluster, block)`.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.blocks.iter().map(|(&(i, j), b)| (i, j, b))
    }

    /// Entry `A[r, c]`.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        let key = (self.partition.cluster_of(r), self.partition.cluster_of(c));
        self.blocks.get(&key).map_or(0.0, |b| {
            b[(self.partition.within_index(r), self.partition.within_index(c))]
        })
    }

    /// Materializes the dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (ri, &r) in rows.iter().enumerate() {
                for (cj, &c) in cols.iter().enumerate() {
                    a[(r, c)] = block[(ri, cj)];
                }
            }
        }
        a
    }

    /// `A v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n, "apply: length mismatch");
        let mut out = DVector::zeros(self.n);
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (ri, &r) in rows.iter().enumerate() {
                let mut acc = 0.0;
                for (cj, &c) in cols.iter().enumerate() {
                    acc += block[(ri, cj)] * v[c];
                }
                out[r] += acc;
            }
        }
        out
    }

    /// `A' v`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n, "apply_transpose: length mismatch");
        let mut out = DVector::zeros(self.n);
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (cj, &c) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for (ri, &r) in rows.iter().enumerate() {
                    acc += block[(ri, cj)] * v[r];
                }
                out[c] += acc;
            }
        }
        out
    }

    /// `x' A y`.
    pub fn quadratic_form(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.n, "quadratic_form: x length mismatch");
        assert_eq!(y.len(), self.n, "quadratic_form: y length mismatch");
        let mut total = 0.0;
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (ri, &r) in rows.iter().enumerate() {
                let mut acc = 0.0;
                for (cj, &c) in cols.iter().enumerate() {
                    acc += block[(ri, cj)] * y[c];
                }
                total += x[r] * acc;
            }
        }
        total
    }

    /// `trace(A)`.
    pub fn trace(&self) -> f64 {
        self.blocks
            .iter()
            .filter(|(&(i, j), _)| i == j)
            .map(|(_, b)| b.diagonal().sum())
            .sum()
    }

    /// Trace of each diagonal cluster block.
    pub fn per_cluster_trace(&self) -> Vec<f64> {
        (0..self.partition.num_clusters())
            .map(|i| self.blocks.get(&(i, i)).map_or(0.0, |b| b.diagonal().sum()))
            .collect()
    }

    /// `(||diag blocks||_F^2, ||offdiag blocks||_F^2)`.
    pub fn frobenius_sq_split(&self) -> (f64, f64) {
        let mut diag = 0.0;
        let mut off = 0.0;
        for (&(i, j), block) in &self.blocks {
            let s: f64 = block.iter().map(|v| v * v).sum();
            if i == j {
                diag += s;
            } else {
                off += s;
            }
        }
        (diag, off)
    }

    /// Power-iteration estimate of the spectral norm `||A||_2` (largest
    /// singular value), iterating on `A'A` from a deterministic start.
    pub fn operator_norm_estimate(&self) -> f64 {
        let n = self.n as f64;
        let mut v = DVector::from_fn(self.n, |i, _| 1.0 + (i as f64) / n);
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let mut sigma = 0.0f64;
        for _ in 0..50 {
            let av = self.apply(&v);
            let mut next = self.apply_transpose(&av);
            let norm = next.norm();
            if norm == 0.0 {
                return 0.0;
            }
            next /= norm;
            let new_sigma = self.apply(&next).norm();
            if (new_sigma - sigma).abs() <= 1e-8 * new_sigma.max(1.0) {
                return new_sigma;
            }
            sigma = new_sigma;
            v = next;
        }
        sigma
    }

    /// Measures how far `A` is from the declared centering class.
    pub fn validate_class(
        &self,
        controls: &ControlMatrix,
        exclusion: &ExclusionMatrix,
    ) -> ClassViolations {
        let w = controls.to_dense();
        let w_norm = w.norm();
        let product_norm = match self.mode {
            CenteringMode::Outcome => self.matmul_dense(&w).norm(),
            CenteringMode::Design => self.transpose_matmul_dense(&w).norm(),
        };
        let annihilation = if w_norm > 0.0 {
            product_norm / w_norm
        } else {
            0.0
        };
        let exclusion_violation = exclusion
            .iter_zero_pairs()
            .map(|(r, c)| self.entry(r, c).abs())
            .fold(0.0, f64::max);
        ClassViolations {
            annihilation,
            exclusion: exclusion_violation,
        }
    }

    /// `A * rhs` for a dense right-hand side.
    pub fn matmul_dense(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(rhs.nrows(), self.n, "matmul: dimension mismatch");
        let mut out = DMatrix::zeros(self.n, rhs.ncols());
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (ri, &r) in rows.iter().enumerate() {
                for (cj, &c) in cols.iter().enumerate() {
                    let v = block[(ri, cj)];
                    if v != 0.0 {
                        for q in 0..rhs.ncols() {
                            out[(r, q)] += v * rhs[(c, q)];
                        }
                    }
                }
            }
        }
        out
    }

    /// `A' * rhs` for a dense right-hand side.
    pub fn transpose_matmul_dense(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(rhs.nrows(), self.n, "matmul: dimension mismatch");
        let mut out = DMatrix::zeros(self.n, rhs.ncols());
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (ri, &r) in rows.iter().enumerate() {
                for (cj, &c) in cols.iter().enumerate() {
                    let v = block[(ri, cj)];
                    if v != 0.0 {
                        for q in 0..rhs.ncols() {
                            out[(c, q)] += v * rhs[(r, q)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Entries with `|A[r, c]| > threshold * max |A|` as `(r, c, value)`
    /// triplets in row-major order. `threshold` is relative; 0 exports every
    /// stored nonzero.
    pub fn export_triplets(&self, threshold: f64) -> Vec<(usize, usize, f64)> {
        let max_abs = self
            .blocks
            .values()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let cut = threshold * max_abs;
        let mut out = Vec::new();
        for (&(i, j), block) in &self.blocks {
            let rows = self.partition.members(i);
            let cols = self.partition.members(j);
            for (ri, &r) in rows.iter().enumerate() {
                for (cj, &c) in cols.iter().enumerate() {
                    let v = block[(ri, cj)];
                    if v != 0.0 && v.abs() > cut {
                        out.push((r, c, v));
                    }
                }
            }
        }
        out.sort_unstable_by_key(|t| (t.0, t.1));
        out
    }

    /// Writes [`CenteringMatrix::export_triplets`] as CSV `row,col,value`.
    pub fn write_triplets_csv<W: std::io::Write>(
        &self,
        writer: W,
        threshold: f64,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["row", "col", "value"])?;
        for (r, c, v) in self.export_triplets(threshold) {
            wtr.write_record([r.to_string(), c.to_string(), format!("{v:.17e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Summary diagnostics.
    pub fn diagnostics(&self) -> CenteringDiagnostics {
        let (diag, off) = self.frobenius_sq_split();
        let offdiag_ratio = if diag > 0.0 {
            (off / diag).sqrt()
        } else if off > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let max_t = self.partition.max_size() as f64;
        let n = self.n as f64;
        CenteringDiagnostics {
            n: self.n,
            num_clusters: self.partition.num_clusters(),
            mode: self.mode,
            method: self.method,
            trace: self.trace(),
            frob_sq_total: diag + off,
            frob_sq_diag_blocks: diag,
            frob_sq_offdiag_blocks: off,
            offdiag_ratio,
            operator_norm_estimate: self.operator_norm_estimate(),
            per_cluster_trace: self.per_cluster_trace(),
            max_size_over_n: max_t / n,
            max_size_sq_over_n: max_t * max_t / n,
            max_size_fourth_over_n: max_t.powi(4) / n,
        }
    }
}

/// Builds `A*` for the given mode and method.
///
/// Design mode is computed through the transposition identity: the design
/// solution for exclusion pattern `E` is the transpose of the outcome
/// solution for `E'` (the objective and both constraint families transpose
/// into each other because `M` is symmetric).
pub fn build_astar(
    proj: &ProjectionMatrix,
    exclusion: &ExclusionMatrix,
    mode: CenteringMode,
    method: CenteringMethod,
) -> Result<CenteringMatrix> {
    if proj.n() != exclusion.n() {
        return Err(Error::Invalid(format!(
            "projection has {} observations, exclusion has {}",
            proj.n(),
            exclusion.n()
        )));
    }
    match mode {
        CenteringMode::Outcome => build_outcome(proj, exclusion, method),
        CenteringMode::Design => {
            let transposed = exclusion.transpose();
            let outcome = build_outcome(proj, &transposed, method)?;
            let mut blocks = BTreeMap::new();
            for (&(i, j), b) in &outcome.blocks {
                blocks.insert((j, i), b.transpose());
            }
            Ok(CenteringMatrix {
                n: outcome.n,
                mode: CenteringMode::Design,
                method,
                partition: outcome.partition,
                blocks,
            })
        }
    }
}

fn build_outcome(
    proj: &ProjectionMatrix,
    exclusion: &ExclusionMatrix,
    method: CenteringMethod,
) -> Result<CenteringMatrix> {
    let partition = exclusion.partition();
    match method {
        CenteringMethod::LeaveOut => {
            let n = proj.n();
            let mut rows = Vec::with_capacity(n);
            for r in 0..n {
                let keep = exclusion.keep_mask_for_row(r);
                // Excluded positions are absent from the sparse row by
                // construction, which realizes the exact-zero requirement.
                rows.push((r, proj.leave_out_row_sparse(r, &keep)?));
            }
            Ok(CenteringMatrix::from_rows(
                partition,
                CenteringMode::Outcome,
                CenteringMethod::LeaveOut,
                rows,
            ))
        }
        CenteringMethod::BlockB => {
            let m = proj.to_dense();
            let n = proj.n();
            let mut a = DMatrix::zeros(n, n);
            for r in 0..n {
                let dropped = exclusion.excluded_in_row(r);
                if dropped.is_empty() {
                    a.row_mut(r).copy_from(&m.row(r));
                    continue;
                }
                let d = dropped.len();
                let sub = DMatrix::from_fn(d, d, |p, q| m[(dropped[p], dropped[q])]);
                let pinv = pseudoinverse(&sub);
                let m_rd = DVector::from_fn(d, |p, _| m[(r, dropped[p])]);
                let b_coef = &pinv * m_rd;
                for c in 0..n {
                    let mut v = m[(r, c)];
                    for (p, &dp) in dropped.iter().enumerate() {
                        v -= b_coef[p] * m[(dp, c)];
                    }
                    a[(r, c)] = v;
                }
                // The correction annihilates the excluded entries exactly in
                // exact arithmetic; pin them to zero against roundoff.
                for &dp in dropped {
                    a[(r, dp)] = 0.0;
                }
            }
            Ok(CenteringMatrix::from_dense(
                partition,
                CenteringMode::Outcome,
                CenteringMethod::BlockB,
                &a,
            ))
        }
        CenteringMethod::VecOracle => {
            let a = vec_oracle_dense(proj, exclusion, CenteringMode::Outcome)?;
            Ok(CenteringMatrix::from_dense(
                partition,
                CenteringMode::Outcome,
                CenteringMethod::VecOracle,
                &a,
            ))
        }
    }
}

/// Exact dense solution of the constrained projection, solving the stated
/// mode's constraint system directly (design mode does *not* go through the
/// transposition identity used by [`build_astar`]). Intended as an
/// independent oracle for tests and diagnostics; guarded by
/// [`ORACLE_SIZE_LIMIT`].
pub fn oracle_dense(
    proj: &ProjectionMatrix,
    exclusion: &ExclusionMatrix,
    mode: CenteringMode,
) -> Result<DMatrix<f64>> {
    vec_oracle_dense(proj, exclusion, mode)
}

/// Per-row correction coefficients of the `BlockB` construction: for each
/// row `r` with a nonempty excluded set, the pairs `(l, B[r, l])` over the
/// excluded columns `l`. Exposed for diagnostics; when the excluded
/// submatrix of `M` is singular the coefficients are pseudoinverse-minimal
/// but the resulting `A*` is unique regardless.
pub fn block_b_rows(
    proj: &ProjectionMatrix,
    exclusion: &ExclusionMatrix,
) -> Vec<(usize, Vec<(usize, f64)>)> {
    let m = proj.to_dense();
    let mut out = Vec::new();
    for r in 0..proj.n() {
        let dropped = exclusion.excluded_in_row(r);
        if dropped.is_empty() {
            continue;
        }
        let d = dropped.len();
        let sub = DMatrix::from_fn(d, d, |p, q| m[(dropped[p], dropped[q])]);
        let pinv = pseudoinverse(&sub);
        let m_rd = DVector::from_fn(d, |p, _| m[(r, dropped[p])]);
        let b_coef = &pinv * m_rd;
        out.push((
            r,
            dropped
                .iter()
                .enumerate()
                .map(|(p, &l)| (l, b_coef[p]))
                .collect(),
        ));
    }
    out
}

/// Constraint rows of the vectorized construction.
enum OracleRow {
    /// `A[r, c] = 0`.
    Selector { r: usize, c: usize },
    /// Outcome: `sum_c A[fixed, c] W[c, k] = 0` (one per row and control);
    /// design:  `sum_r W[r, k] A[r, fixed] = 0` (one per column and control).
    Annihilate { fixed: usize, k: usize },
}

/// Exact solution of the constrained projection in vectorized form,
/// exploiting only the sparsity of the constraint rows (each selector row
/// has one nonzero; each annihilation row is supported on one row or column
/// of `A`). Guarded by [`ORACLE_SIZE_LIMIT`].
fn vec_oracle_dense(
    proj: &ProjectionMatrix,
    exclusion: &ExclusionMatrix,
    mode: CenteringMode,
) -> Result<DMatrix<f64>> {
    let n = proj.n();
    if n > ORACLE_SIZE_LIMIT {
        return Err(Error::OracleSizeExceeded {
            n,
            limit: ORACLE_SIZE_LIMIT,
        });
    }
    let w = proj.controls().to_dense();
    let k = w.ncols();
    let m = proj.to_dense();
    let gram = w.transpose() * &w;
    let mw = &m * &w;

    let mut rows: Vec<OracleRow> = Vec::new();
    for (r, c) in exclusion.iter_zero_pairs() {
        rows.push(OracleRow::Selector { r, c });
    }
    for fixed in 0..n {
        for kk in 0..k {
            rows.push(OracleRow::Annihilate { fixed, k: kk });
        }
    }
    let l = rows.len();

    // G = L L' assembled from the analytic inner products of constraint rows.
    let mut g = DMatrix::zeros(l, l);
    for (p, rp) in rows.iter().enumerate() {
        for (q, rq) in rows.iter().enumerate().skip(p) {
            let v = match (rp, rq) {
                (OracleRow::Selector { r: r1, c: c1 }, OracleRow::Selector { r: r2, c: c2 }) => {
                    if r1 == r2 && c1 == c2 {
                        1.0
                    } else {
                        0.0
                    }
                }
                (OracleRow::Selector { r, c }, OracleRow::Annihilate { fixed, k: kk })
                | (OracleRow::Annihilate { fixed, k: kk }, OracleRow::Selector { r, c }) => {
                    match mode {
                        CenteringMode::Outcome => {
                            if r == fixed {
                                w[(*c, *kk)]
                            } else {
                                0.0
                            }
                        }
                        CenteringMode::Design => {
                            if c == fixed {
                                w[(*r, *kk)]
                            } else {
                                0.0
                            }
                        }
                    }
                }
                (
                    OracleRow::Annihilate { fixed: f1, k: k1 },
                    OracleRow::Annihilate { fixed: f2, k: k2 },
                ) => {
                    if f1 == f2 {
                        gram[(*k1, *k2)]
                    } else {
                        0.0
                    }
                }
            };
            g[(p, q)] = v;
            g[(q, p)] = v;
        }
    }

    // rhs = L vec(M).
    let rhs = DVector::from_fn(l, |p, _| match &rows[p] {
        OracleRow::Selector { r, c } => m[(*r, *c)],
        OracleRow::Annihilate { fixed, k: kk } => match mode {
            // M is symmetric, so (W'M)[k, fixed] = (M W)[fixed, k].
            CenteringMode::Outcome | CenteringMode::Design => mw[(*fixed, *kk)],
        },
    });

    let s = pseudoinverse(&g) * rhs;

    // vec(A) = vec(M) - L' s, accumulated row-wise.
    let mut a = m.clone();
    for (p, row) in rows.iter().enumerate() {
        let sp = s[p];
        if sp == 0.0 {
            continue;
        }
        match row {
            OracleRow::Selector { r, c } => a[(*r, *c)] -= sp,
            OracleRow::Annihilate { fixed, k: kk } => match mode {
                CenteringMode::Outcome => {
                    for c in 0..n {
                        a[(*fixed, c)] -= sp * w[(c, *kk)];
                    }
                }
                CenteringMode::Design => {
                    for r in 0..n {
                        a[(r, *fixed)] -= sp * w[(r, *kk)];
                    }
                }
            },
        }
    }
    // The projection satisfies the selector constraints up to roundoff; pin
    // the excluded entries to exact zeros.
    for (r, c) in exclusion.iter_zero_pairs() {
        a[(r, c)] = 0.0;
    }
    Ok(a)
}

/// The internal instrument implied by design-mode centering, computed
/// directly: `z[l]` is the residual of `x[l]` after regressing `x` on `W`
/// using only the observations `l~` with `E[l~, l] = 1`.
///
/// Identical (including the exact zeros) to `A'x` for the design-mode `A*`.
pub fn design_instrument(
    proj: &ProjectionMatrix,
    exclusion: &ExclusionMatrix,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != proj.n() {
        return Err(Error::Invalid(format!(
            "x has length {}, expected {}",
            x.len(),
            proj.n()
        )));
    }
    let n = proj.n();
    let mut z = DVector::zeros(n);
    for l in 0..n {
        let keep = exclusion.keep_mask_for_col(l);
        let row = proj.leave_out_row_sparse(l, &keep)?;
        let mut acc = 0.0;
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            acc += v * x[i];
        }
        z[l] = acc;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exclusion::ExclusionRecipe;
    use crate::projections::{build_projection, ControlMatrix};
    use approx::assert_relative_eq;

    /// Single cluster of two periods under one-period feedback: the
    /// canonical 2x2 case with closed-form solution.
    fn two_period_setup() -> (ProjectionMatrix, ExclusionMatrix) {
        let partition = ClusterPartition::balanced(1, 2).unwrap();
        let proj = build_projection(ControlMatrix::group_indicators(vec![0, 0]).unwrap()).unwrap();
        let excl = ExclusionMatrix::from_recipe(
            partition,
            &ExclusionRecipe::WeakExogeneity,
            Some(&[1, 2]),
            None,
        )
        .unwrap();
        (proj, excl)
    }

    fn assert_matrices_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let diff = (a - b).amax();
        assert!(diff <= tol, "matrices differ by {diff:.3e} > {tol:.3e}");
    }

    #[test]
    fn two_period_closed_form() {
        // The period-1 row demeans over both periods, the period-2 row is
        // zero: A* = [[1/2, -1/2], [0, 0]].
        let (proj, excl) = two_period_setup();
        for method in [
            CenteringMethod::LeaveOut,
            CenteringMethod::BlockB,
            CenteringMethod::VecOracle,
        ] {
            let a = build_astar(&proj, &excl, CenteringMode::Outcome, method).unwrap();
            let d = a.to_dense();
            assert_relative_eq!(d[(0, 0)], 0.5, epsilon = 1e-10);
            assert_relative_eq!(d[(0, 1)], -0.5, epsilon = 1e-10);
            assert_eq!(d[(1, 0)], 0.0);
            assert_relative_eq!(d[(1, 1)], 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_period_block_b_coefficient() {
        // B[(period 2), (period 1)] = M[1,0] / M[0,0] = (-1/2)/(1/2) = -1.
        let (proj, excl) = two_period_setup();
        let rows = block_b_rows(&proj, &excl);
        assert_eq!(rows.len(), 1);
        let (r, coefs) = &rows[0];
        assert_eq!(*r, 1);
        assert_eq!(coefs.len(), 1);
        assert_eq!(coefs[0].0, 0);
        assert_relative_eq!(coefs[0].1, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn contemporaneous_exclusion_kills_astar() {
        let partition = ClusterPartition::balanced(3, 3).unwrap();
        let proj =
            build_projection(ControlMatrix::group_indicators(partition.assignment().to_vec())
                .unwrap())
            .unwrap();
        let excl = ExclusionMatrix::from_recipe(
            partition,
            &ExclusionRecipe::Contemporaneous,
            None,
            None,
        )
        .unwrap();
        for method in [
            CenteringMethod::LeaveOut,
            CenteringMethod::BlockB,
            CenteringMethod::VecOracle,
        ] {
            let a = build_astar(&proj, &excl, CenteringMode::Outcome, method).unwrap();
            assert!(
                a.to_dense().amax() <= 1e-10,
                "contemporaneous-only exclusion must produce A* = 0"
            );
        }
    }

    #[test]
    fn unrestricted_recovers_m() {
        let partition = ClusterPartition::balanced(2, 3).unwrap();
        let proj =
            build_projection(ControlMatrix::group_indicators(partition.assignment().to_vec())
                .unwrap())
            .unwrap();
        let excl =
            ExclusionMatrix::from_recipe(partition, &ExclusionRecipe::Unrestricted, None, None)
                .unwrap();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        assert_matrices_close(&a.to_dense(), &proj.to_dense(), 1e-12);
        assert_relative_eq!(a.trace(), proj.trace(), epsilon = 1e-10);
    }

    #[test]
    fn three_methods_agree_on_dense_controls() {
        // Random-ish dense controls, unbalanced clusters, mixed exclusions.
        let partition = ClusterPartition::new(vec![0, 0, 0, 1, 1, 2, 2, 2, 2]).unwrap();
        let n = partition.n();
        let w = DMatrix::from_fn(n, 2, |i, j| {
            let x = (i * 7 + j * 3 + 1) as f64;
            if j == 0 {
                1.0
            } else {
                (x * 0.37).sin() + 0.1 * x
            }
        });
        let proj = build_projection(ControlMatrix::dense(w).unwrap()).unwrap();
        let pairs = vec![(1, 0), (2, 0), (2, 1), (4, 3), (7, 5), (8, 6), (8, 7)];
        let excl = ExclusionMatrix::from_zero_pairs(partition, pairs).unwrap();
        for mode in [CenteringMode::Outcome, CenteringMode::Design] {
            let lo = build_astar(&proj, &excl, mode, CenteringMethod::LeaveOut).unwrap();
            let bb = build_astar(&proj, &excl, mode, CenteringMethod::BlockB).unwrap();
            let vo = build_astar(&proj, &excl, mode, CenteringMethod::VecOracle).unwrap();
            assert_matrices_close(&lo.to_dense(), &vo.to_dense(), 1e-9);
            assert_matrices_close(&bb.to_dense(), &vo.to_dense(), 1e-9);
            let v = lo.validate_class(proj.controls(), &excl);
            assert!(v.annihilation <= 1e-9, "annihilation {:.3e}", v.annihilation);
            assert_eq!(v.exclusion, 0.0);
        }
    }

    #[test]
    fn trace_equals_frobenius_sq() {
        let (proj, excl) = two_period_setup();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        let (d, o) = a.frobenius_sq_split();
        assert_relative_eq!(a.trace(), d + o, epsilon = 1e-12);
    }

    #[test]
    fn design_mode_is_transpose_of_outcome_on_transposed_pattern() {
        let partition = ClusterPartition::balanced(2, 3).unwrap();
        let proj =
            build_projection(ControlMatrix::group_indicators(partition.assignment().to_vec())
                .unwrap())
            .unwrap();
        let times = vec![1, 2, 3, 1, 2, 3];
        let excl = ExclusionMatrix::from_recipe(
            partition,
            &ExclusionRecipe::WeakExogeneity,
            Some(&times),
            None,
        )
        .unwrap();
        let design =
            build_astar(&proj, &excl, CenteringMode::Design, CenteringMethod::LeaveOut).unwrap();
        let outcome_t = build_astar(
            &proj,
            &excl.transpose(),
            CenteringMode::Outcome,
            CenteringMethod::LeaveOut,
        )
        .unwrap();
        assert_matrices_close(&design.to_dense(), &outcome_t.to_dense().transpose(), 1e-12);
        // Design-mode annihilation: W'A = 0.
        let v = design.validate_class(proj.controls(), &excl);
        assert!(v.annihilation <= 1e-10);
        assert_eq!(v.exclusion, 0.0);
    }

    #[test]
    fn native_design_oracle_confirms_transposition_identity() {
        // The dense oracle solves the design-mode constraint system directly
        // (column annihilation, no transposition shortcut); it must agree
        // with the transpose-based build.
        let partition = ClusterPartition::new(vec![0, 0, 0, 1, 1, 2, 2, 2, 2]).unwrap();
        let n = partition.n();
        let w = DMatrix::from_fn(n, 2, |i, j| {
            let x = (i * 5 + j * 2 + 1) as f64;
            if j == 0 {
                1.0
            } else {
                (x * 0.53).cos() + 0.07 * x
            }
        });
        let proj = build_projection(ControlMatrix::dense(w).unwrap()).unwrap();
        let pairs = vec![(1, 0), (2, 1), (4, 3), (6, 5), (8, 5), (7, 8)];
        let excl = ExclusionMatrix::from_zero_pairs(partition, pairs).unwrap();
        let native = oracle_dense(&proj, &excl, CenteringMode::Design).unwrap();
        let via_transpose =
            build_astar(&proj, &excl, CenteringMode::Design, CenteringMethod::VecOracle).unwrap();
        assert_matrices_close(&native, &via_transpose.to_dense(), 1e-9);
    }

    #[test]
    fn design_instrument_matches_design_astar() {
        let partition = ClusterPartition::balanced(2, 3).unwrap();
        let proj =
            build_projection(ControlMatrix::group_indicators(partition.assignment().to_vec())
                .unwrap())
            .unwrap();
        let times = vec![1, 2, 3, 1, 2, 3];
        let excl = ExclusionMatrix::from_recipe(
            partition,
            &ExclusionRecipe::WeakExogeneity,
            Some(&times),
            None,
        )
        .unwrap();
        let x = DVector::from_row_slice(&[0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
        let z = design_instrument(&proj, &excl, &x).unwrap();
        let a = build_astar(&proj, &excl, CenteringMode::Design, CenteringMethod::VecOracle)
            .unwrap();
        let z_ref = a.apply_transpose(&x);
        assert_relative_eq!((z - z_ref).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn design_instrument_unrestricted_is_residualization() {
        let proj = build_projection(ControlMatrix::intercept(4).unwrap()).unwrap();
        let partition = ClusterPartition::balanced(2, 2).unwrap();
        let excl =
            ExclusionMatrix::from_recipe(partition, &ExclusionRecipe::Unrestricted, None, None)
                .unwrap();
        let x = DVector::from_row_slice(&[1.0, 2.0, 3.0, 10.0]);
        let z = design_instrument(&proj, &excl, &x).unwrap();
        assert_relative_eq!((z - proj.residualize(&x)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn oracle_size_guard() {
        let n = ORACLE_SIZE_LIMIT + 1;
        let partition = ClusterPartition::balanced(n, 1).unwrap();
        let proj = build_projection(ControlMatrix::intercept(n).unwrap()).unwrap();
        let excl =
            ExclusionMatrix::from_recipe(partition, &ExclusionRecipe::Unrestricted, None, None)
                .unwrap();
        match build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::VecOracle) {
            Err(Error::OracleSizeExceeded { n: got, limit }) => {
                assert_eq!(got, n);
                assert_eq!(limit, ORACLE_SIZE_LIMIT);
            }
            other => panic!("expected size guard, got {other:?}"),
        }
    }

    #[test]
    fn block_sparsity_for_fixed_effects() {
        // Cluster fixed effects with within-cluster exclusions give a
        // block-diagonal A*.
        let partition = ClusterPartition::balanced(4, 3).unwrap();
        let proj =
            build_projection(ControlMatrix::group_indicators(partition.assignment().to_vec())
                .unwrap())
            .unwrap();
        let times: Vec<i64> = (0..12).map(|l| (l % 3 + 1) as i64).collect();
        let excl = ExclusionMatrix::from_recipe(
            partition,
            &ExclusionRecipe::WeakExogeneity,
            Some(&times),
            None,
        )
        .unwrap();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        assert!(a.is_block_diagonal());
        assert_eq!(a.block_count(), 4);
    }

    #[test]
    fn apply_and_quadratic_form_match_dense() {
        let (proj, excl) = two_period_setup();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        let d = a.to_dense();
        let x = DVector::from_row_slice(&[1.0, 3.0]);
        let y = DVector::from_row_slice(&[2.0, 6.0]);
        assert_relative_eq!((a.apply(&y) - &d * &y).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            (a.apply_transpose(&x) - d.transpose() * &x).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(a.quadratic_form(&x, &y), (x.transpose() * &d * &y)[0]);
    }

    #[test]
    fn triplet_export_thresholds_relative_to_max() {
        // Mixed magnitudes: the cut is relative to the largest entry.
        let partition = ClusterPartition::singletons(2);
        let dense =
            DMatrix::from_row_slice(2, 2, &[1.0, 0.004, 0.0, 0.5]);
        let a = CenteringMatrix::from_dense(
            &partition,
            CenteringMode::Outcome,
            CenteringMethod::LeaveOut,
            &dense,
        );
        // cut = 0.01 * 1.0 drops the 0.004 entry, keeps 1.0 and 0.5.
        assert_eq!(a.export_triplets(0.01), vec![(0, 0, 1.0), (1, 1, 0.5)]);
        // Zero threshold keeps every stored nonzero; structural zeros are
        // never exported.
        assert_eq!(
            a.export_triplets(0.0),
            vec![(0, 0, 1.0), (0, 1, 0.004), (1, 1, 0.5)]
        );
        // Threshold 1 keeps nothing (strict comparison).
        assert_eq!(a.export_triplets(1.0).len(), 0);
    }

    #[test]
    fn operator_norm_of_projection_block() {
        // A* = [[1/2, -1/2], [0, 0]] has singular values {1/sqrt(2), 0}.
        let (proj, excl) = two_period_setup();
        let a = build_astar(&proj, &excl, CenteringMode::Outcome, CenteringMethod::LeaveOut)
            .unwrap();
        assert_relative_eq!(
            a.operator_norm_estimate(),
            0.5f64.sqrt(),
            epsilon = 1e-6
        );
    }
}
