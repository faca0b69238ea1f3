//! Control designs, annihilator matrices, and leave-out projection rows.
//!
//! For controls `W` (n x k, full column rank) the annihilator is
//! `M = I - W (W'W)^-1 W'`. Two control representations are supported:
//!
//! - `Dense`: an arbitrary real design matrix.
//! - `GroupIndicators`: disjoint group dummies (fixed effects). The Gram
//!   matrix is diagonal, so projections reduce to group demeaning; this keeps
//!   large panel designs (thousands of dummy columns) tractable without a
//!   sparse solver.
//!
//! The leave-out projection row for observation `r` under a keep-mask `S`
//! (with `r` in `S`) is row `r` of `M_S = I - W_S (W_S' W_S)^+ W_S'`, where
//! `W_S` zeroes the rows outside `S`. Entries at masked positions are zero by
//! construction. Masked Gram pseudoinverses for dense controls are cached by
//! mask because many observations share a keep-mask in typical designs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Relative eigenvalue tolerance: eigenvalues below `tol * max_eigenvalue`
/// are treated as zero by [`pseudoinverse`] and by the rank check in
/// [`build_projection`].
pub const EIGENVALUE_RTOL: f64 = 1e-12;

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix via
/// eigendecomposition. Eigenvalues below `EIGENVALUE_RTOL` times the largest
/// eigenvalue are treated as exact zeros; the zero matrix maps to itself.
pub fn pseudoinverse(g: &DMatrix<f64>) -> DMatrix<f64> {
    pseudoinverse_with_rank(g).0
}

/// [`pseudoinverse`] along with the numerical rank it detected.
pub fn pseudoinverse_with_rank(g: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    assert_eq!(g.nrows(), g.ncols(), "pseudoinverse needs a square matrix");
    let k = g.nrows();
    if k == 0 {
        return (g.clone(), 0);
    }
    let eig = g.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = EIGENVALUE_RTOL * max_eig;
    let mut rank = 0;
    let inv_vals = DVector::from_iterator(
        k,
        eig.eigenvalues.iter().map(|&v| {
            if v.abs() > tol && max_eig > 0.0 {
                rank += 1;
                1.0 / v
            } else {
                0.0
            }
        }),
    );
    let u = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(k, k, |i, j| u[(i, j)] * inv_vals[j]);
    (&scaled * u.transpose(), rank)
}

/// Internal representation of the control design.
#[derive(Debug, Clone)]
enum Repr {
    Dense(DMatrix<f64>),
    Groups {
        assignment: Vec<usize>,
        members: Vec<Vec<usize>>,
    },
}

/// The control design `W` (n observations by k columns).
#[derive(Debug, Clone)]
pub struct ControlMatrix {
    repr: Repr,
    n: usize,
    k: usize,
}

impl ControlMatrix {
    /// Arbitrary dense controls. An intercept must be included explicitly if
    /// desired.
    pub fn dense(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::Invalid(
                "control matrix must have at least one row and one column".into(),
            ));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("control matrix has non-finite entries".into()));
        }
        let (n, k) = (w.nrows(), w.ncols());
        Ok(Self {
            repr: Repr::Dense(w),
            n,
            k,
        })
    }

    /// Disjoint group indicators (one dummy column per group id). Ids must be
    /// contiguous `0..max_id+1` with no empty group.
    pub fn group_indicators(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Invalid("group indicators need observations".into()));
        }
        let k = assignment.iter().max().copied().unwrap_or(0) + 1;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (obs, &g) in assignment.iter().enumerate() {
            members[g].push(obs);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!(
                "group id {empty} has no members (ids must be contiguous)"
            )));
        }
        let n = assignment.len();
        Ok(Self {
            repr: Repr::Groups {
                assignment,
                members,
            },
            n,
            k,
        })
    }

    /// Intercept-only controls (a single all-ones column).
    pub fn intercept(n: usize) -> Result<Self> {
        Self::group_indicators(vec![0; n])
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of control columns.
    pub fn k(&self) -> usize {
        self.k
    }

    /// True when in the group-indicator representation.
    pub fn is_group_indicators(&self) -> bool {
        matches!(self.repr, Repr::Groups { .. })
    }

    /// Materializes `W` as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Dense(w) => w.clone(),
            Repr::Groups { assignment, .. } => {
                let mut w = DMatrix::zeros(self.n, self.k);
                for (obs, &g) in assignment.iter().enumerate() {
                    w[(obs, g)] = 1.0;
                }
                w
            }
        }
    }

    /// Row `l` of `W` as a dense vector.
    pub fn row(&self, l: usize) -> DVector<f64> {
        match &self.repr {
            Repr::Dense(w) => w.row(l).transpose(),
            Repr::Groups { assignment, .. } => {
                let mut v = DVector::zeros(self.k);
                v[assignment[l]] = 1.0;
                v
            }
        }
    }
}

/// A sparse row: strictly increasing indices with matching values.
#[derive(Debug, Clone)]
pub(crate) struct SparseRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub(crate) fn to_dense(&self, n: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            v[i] = x;
        }
        v
    }
}

/// Cached factorization of the full Gram matrix for dense controls.
#[derive(Debug, Clone)]
enum GramSolver {
    /// Group-indicator controls: the Gram matrix is `diag(group sizes)`.
    GroupCounts(Vec<f64>),
    /// Dense controls: eigenfactorization of `W'W` (full rank enforced).
    DenseFactor {
        /// `(W'W)^-1` (well defined: full rank is checked at build time).
        gram_inv: DMatrix<f64>,
    },
}

type MaskKey = Box<[u64]>;

/// The annihilator `M = I - W (W'W)^-1 W'` held in factored form.
///
/// `M` is symmetric idempotent with `trace(M) = n - k` and `M W = 0`. Rows
/// and matrix-vector products are computed from the factorization; the dense
/// matrix is materialized only on request.
pub struct ProjectionMatrix {
    controls: ControlMatrix,
    solver: GramSolver,
    mask_cache: Mutex<HashMap<MaskKey, Arc<DMatrix<f64>>>>,
}

impl std::fmt::Debug for ProjectionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectionMatrix")
            .field("n", &self.n())
            .field("k", &self.k())
            .finish()
    }
}

impl Clone for ProjectionMatrix {
    fn clone(&self) -> Self {
        Self {
            controls: self.controls.clone(),
            solver: self.solver.clone(),
            mask_cache: Mutex::new(HashMap::new()),
        }
    }
}

/// Builds the annihilator of `controls`, verifying full column rank.
///
/// Rank is determined from the eigenvalues of `W'W` using the same relative
/// tolerance as [`pseudoinverse`]; a deficient design is rejected rather than
/// silently regularized.
pub fn build_projection(controls: ControlMatrix) -> Result<ProjectionMatrix> {
    if controls.k() >= controls.n() {
        return Err(Error::Invalid(format!(
            "need more observations than control columns (n = {}, k = {})",
            controls.n(),
            controls.k()
        )));
    }
    let solver = match &controls.repr {
        Repr::Groups { members, .. } => {
            GramSolver::GroupCounts(members.iter().map(|m| m.len() as f64).collect())
        }
        Repr::Dense(w) => {
            let gram = w.transpose() * w;
            let (pinv, rank) = pseudoinverse_with_rank(&gram);
            if rank < controls.k() {
                return Err(Error::RankDeficientControls {
                    rank,
                    cols: controls.k(),
                });
            }
            GramSolver::DenseFactor { gram_inv: pinv }
        }
    };
    Ok(ProjectionMatrix {
        controls,
        solver,
        mask_cache: Mutex::new(HashMap::new()),
    })
}

impl ProjectionMatrix {
    /// Number of observations.
    pub fn n(&self) -> usize {
        self.controls.n()
    }

    /// Number of control columns.
    pub fn k(&self) -> usize {
        self.controls.k()
    }

    /// The underlying controls.
    pub fn controls(&self) -> &ControlMatrix {
        &self.controls
    }

    /// `trace(M) = n - k` (full rank is enforced at construction).
    pub fn trace(&self) -> f64 {
        (self.n() - self.k()) as f64
    }

    /// `M v`: residualizes a vector against the controls.
    pub fn residualize(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n(), "residualize: length mismatch");
        match (&self.controls.repr, &self.solver) {
            (Repr::Groups { assignment, members }, GramSolver::GroupCounts(counts)) => {
                let mut means = vec![0.0f64; members.len()];
                for (obs, &g) in assignment.iter().enumerate() {
                    means[g] += v[obs];
                }
                for (g, m) in means.iter_mut().enumerate() {
                    *m /= counts[g];
                }
                DVector::from_fn(self.n(), |obs, _| v[obs] - means[assignment[obs]])
            }
            (Repr::Dense(w), GramSolver::DenseFactor { gram_inv }) => {
                let coef = gram_inv * (w.transpose() * v);
                v - w * coef
            }
            _ => unreachable!("solver matches representation by construction"),
        }
    }

    /// Entry `M[r, c]`.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        let delta = if r == c { 1.0 } else { 0.0 };
        match (&self.controls.repr, &self.solver) {
            (Repr::Groups { assignment, .. }, GramSolver::GroupCounts(counts)) => {
                if assignment[r] == assignment[c] {
                    delta - 1.0 / counts[assignment[r]]
                } else {
                    delta
                }
            }
            (Repr::Dense(w), GramSolver::DenseFactor { gram_inv }) => {
                let wr = w.row(r).transpose();
                let wc = w.row(c).transpose();
                delta - (gram_inv * wc).dot(&wr)
            }
            _ => unreachable!(),
        }
    }

    /// Row `r` of `M` in sparse form (group controls give genuinely sparse
    /// rows; dense controls give a full row).
    pub(crate) fn row_sparse(&self, r: usize) -> SparseRow {
        match (&self.controls.repr, &self.solver) {
            (Repr::Groups { assignment, members }, GramSolver::GroupCounts(counts)) => {
                let g = assignment[r];
                let inv = 1.0 / counts[g];
                let indices = members[g].clone();
                let values = indices
                    .iter()
                    .map(|&c| if c == r { 1.0 - inv } else { -inv })
                    .collect();
                SparseRow { indices, values }
            }
            (Repr::Dense(w), GramSolver::DenseFactor { gram_inv }) => {
                let coef = gram_inv * w.row(r).transpose();
                let proj = w * coef;
                let values = (0..self.n())
                    .map(|c| if c == r { 1.0 - proj[c] } else { -proj[c] })
                    .collect();
                SparseRow {
                    indices: (0..self.n()).collect(),
                    values,
                }
            }
            _ => unreachable!(),
        }
    }

    /// Row `r` of `M` as a dense vector.
    pub fn row(&self, r: usize) -> DVector<f64> {
        self.row_sparse(r).to_dense(self.n())
    }

    /// Materializes `M` as a dense matrix (`O(n^2)` memory).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match (&self.controls.repr, &self.solver) {
            (Repr::Groups { assignment, .. }, GramSolver::GroupCounts(counts)) => {
                DMatrix::from_fn(self.n(), self.n(), |r, c| {
                    let delta = if r == c { 1.0 } else { 0.0 };
                    if assignment[r] == assignment[c] {
                        delta - 1.0 / counts[assignment[r]]
                    } else {
                        delta
                    }
                })
            }
            (Repr::Dense(w), GramSolver::DenseFactor { gram_inv }) => {
                let b = w * gram_inv; // n x k
                let mut m = DMatrix::identity(self.n(), self.n());
                m.gemm(-1.0, &b, &w.transpose(), 1.0);
                m
            }
            _ => unreachable!(),
        }
    }

    /// `max_r sum_c |M[r, c]|` without materializing `M` for group controls.
    pub fn infinity_norm(&self) -> f64 {
        match (&self.controls.repr, &self.solver) {
            (Repr::Groups { members, .. }, GramSolver::GroupCounts(_)) => members
                .iter()
                .map(|m| {
                    let t = m.len() as f64;
                    2.0 * (t - 1.0) / t
                })
                .fold(0.0, f64::max),
            _ => {
                let m = self.to_dense();
                (0..m.nrows())
                    .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Leave-out projection row: row `r` of `M_S = I - W_S (W_S'W_S)^+ W_S'`
    /// where `W_S` zeroes the rows with `keep = false`. Requires
    /// `keep[r] = true`. Entries at masked positions are zero. If the masked
    /// design is entirely null (e.g. all relevant controls dropped) the row
    /// degenerates to the `r`-th unit vector via the pseudoinverse.
    pub fn leave_out_row(&self, r: usize, keep: &[bool]) -> Result<DVector<f64>> {
        Ok(self.leave_out_row_sparse(r, keep)?.to_dense(self.n()))
    }

    pub(crate) fn leave_out_row_sparse(&self, r: usize, keep: &[bool]) -> Result<SparseRow> {
        if keep.len() != self.n() {
            return Err(Error::Invalid(format!(
                "keep mask length {} != n = {}",
                keep.len(),
                self.n()
            )));
        }
        if !keep[r] {
            return Err(Error::Invalid(format!(
                "leave-out row {r} requires keep[{r}] = true"
            )));
        }
        match &self.controls.repr {
            Repr::Groups { assignment, members } => {
                let g = assignment[r];
                let kept: Vec<usize> = members[g].iter().copied().filter(|&c| keep[c]).collect();
                let inv = 1.0 / kept.len() as f64;
                // Support: kept members of the own group (always contains r).
                let values = kept
                    .iter()
                    .map(|&c| if c == r { 1.0 - inv } else { -inv })
                    .collect();
                Ok(SparseRow {
                    indices: kept,
                    values,
                })
            }
            Repr::Dense(w) => {
                let pinv = self.masked_gram_pinv(w, keep);
                let coef = &*pinv * w.row(r).transpose();
                let mut indices = Vec::new();
                let mut values = Vec::new();
                for (c, &kept) in keep.iter().enumerate() {
                    if !kept {
                        continue;
                    }
                    let delta = if c == r { 1.0 } else { 0.0 };
                    indices.push(c);
                    values.push(delta - w.row(c).transpose().dot(&coef));
                }
                Ok(SparseRow { indices, values })
            }
        }
    }

    /// Pseudoinverse of the masked Gram `W_S' W_S`, cached by mask.
    fn masked_gram_pinv(&self, w: &DMatrix<f64>, keep: &[bool]) -> Arc<DMatrix<f64>> {
        let words = keep.len().div_ceil(64);
        let mut key = vec![0u64; words].into_boxed_slice();
        let mut all_kept = true;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                key[i / 64] |= 1 << (i % 64);
            } else {
                all_kept = false;
            }
        }
        if all_kept {
            if let GramSolver::DenseFactor { gram_inv } = &self.solver {
                return Arc::new(gram_inv.clone());
            }
        }
        if let Some(hit) = self.mask_cache.lock().unwrap().get(&key) {
            return Arc::clone(hit);
        }
        let k = self.k();
        let mut gram = DMatrix::zeros(k, k);
        for (l, &kept) in keep.iter().enumerate() {
            if kept {
                let wl = w.row(l);
                gram.ger(1.0, &wl.transpose(), &wl.transpose(), 1.0);
            }
        }
        let pinv = Arc::new(pseudoinverse(&gram));
        self.mask_cache
            .lock()
            .unwrap()
            .insert(key, Arc::clone(&pinv));
        pinv
    }

    /// Number of distinct masks currently cached (dense controls only).
    pub fn mask_cache_len(&self) -> usize {
        self.mask_cache.lock().unwrap().len()
    }
}
