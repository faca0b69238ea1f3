//! Cluster partitions and exclusion matrices.
//!
//! The exclusion matrix `E` is an `n x n` indicator: `E[l~, l] = 0` declares
//! that the regressor of observation `l~` may be correlated with the error of
//! observation `l`, so the pair must not be used when recombining
//! observations. Zeros can occur only within a cluster (observations in
//! different clusters are independent) and never on the diagonal
//! (contemporaneous exogeneity is maintained throughout). Because zeros are
//! sparse by construction, only the zero pairs are stored.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// A partition of `n` observations into nonempty, mutually independent
/// clusters identified by contiguous ids `0..num_clusters`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    within_index: Vec<usize>,
}

impl ClusterPartition {
    /// Builds a partition from per-observation cluster ids.
    ///
    /// Ids must cover `0..max_id+1` with no empty cluster.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::InvalidPartition("no observations".into()));
        }
        let num_clusters = assignment.iter().max().copied().unwrap_or(0) + 1;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
        for (obs, &c) in assignment.iter().enumerate() {
            members[c].push(obs);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidPartition(format!(
                "cluster id {empty} has no members (ids must be contiguous)"
            )));
        }
        let mut within_index = vec![0usize; assignment.len()];
        for cluster in &members {
            for (pos, &obs) in cluster.iter().enumerate() {
                within_index[obs] = pos;
            }
        }
        Ok(Self {
            assignment,
            members,
            within_index,
        })
    }

    /// Partition with each observation alone in its own cluster.
    pub fn singletons(n: usize) -> Self {
        Self::new((0..n).collect()).expect("singleton partition is always valid")
    }

    /// Balanced panel layout: `num_clusters` clusters of `size` consecutive
    /// observations each.
    pub fn balanced(num_clusters: usize, size: usize) -> Result<Self> {
        if num_clusters == 0 || size == 0 {
            return Err(Error::InvalidPartition(
                "balanced partition needs positive cluster count and size".into(),
            ));
        }
        Self::new((0..num_clusters * size).map(|l| l / size).collect())
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Number of clusters.
    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    /// Cluster id of observation `l`.
    pub fn cluster_of(&self, l: usize) -> usize {
        self.assignment[l]
    }

    /// Observation indices of cluster `i`, ascending.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    /// Position of observation `l` within its own cluster's member list.
    pub fn within_index(&self, l: usize) -> usize {
        self.within_index[l]
    }

    /// Per-observation cluster ids.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Cluster sizes.
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Largest cluster size.
    pub fn max_size(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// True if both observations share a cluster.
    pub fn same_cluster(&self, a: usize, b: usize) -> bool {
        self.assignment[a] == self.assignment[b]
    }

    /// Sum of squared cluster sizes (total within-cluster block area).
    pub fn within_block_area(&self) -> usize {
        self.members.iter().map(|m| m.len() * m.len()).sum()
    }
}

/// Declarative recipes for building an [`ExclusionMatrix`].
///
/// In configuration files, unit recipes are plain strings
/// (`"weak_exogeneity"`) and parameterized ones are single-key tables
/// (`{ horizon = 1 }`, `{ distance_cutoff = 2.5 }`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionRecipe {
    /// No exclusions beyond the (always-kept) diagonal: `E` is all ones.
    Unrestricted,
    /// Lagged-outcome designs: the regressor at a later period may be
    /// correlated with every earlier error in its cluster. Excludes
    /// `(l~, l)` with `time[l~] > time[l]`.
    WeakExogeneity,
    /// Feedback limited to `h` periods: excludes `(l~, l)` with
    /// `1 <= time[l~] - time[l] <= h`.
    Horizon(u32),
    /// Only contemporaneous exogeneity is assumed: every within-cluster
    /// off-diagonal pair is excluded.
    Contemporaneous,
    /// Spatial interference: excludes within-cluster pairs strictly closer
    /// than `radius` (a pair at exactly `radius` stays included).
    DistanceCutoff(f64),
}

/// Sparse `n x n` exclusion indicator storing the within-cluster zero pairs.
#[derive(Debug, Clone)]
pub struct ExclusionMatrix {
    partition: ClusterPartition,
    excluded_by_row: Vec<Vec<usize>>,
    excluded_by_col: Vec<Vec<usize>>,
    zero_pairs: usize,
}

impl ExclusionMatrix {
    /// Builds `E` from an explicit list of zero pairs `(row, col)` meaning
    /// `E[row, col] = 0`. Pairs must be within-cluster and off-diagonal;
    /// duplicates are collapsed.
    pub fn from_zero_pairs(
        partition: ClusterPartition,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = partition.n();
        let mut set = BTreeSet::new();
        for (r, c) in pairs {
            if r >= n || c >= n {
                return Err(Error::InvalidExclusion(format!(
                    "pair ({r}, {c}) out of range for {n} observations"
                )));
            }
            if r == c {
                return Err(Error::InvalidExclusion(format!(
                    "diagonal pair ({r}, {r}) cannot be excluded"
                )));
            }
            if !partition.same_cluster(r, c) {
                return Err(Error::InvalidExclusion(format!(
                    "pair ({r}, {c}) spans clusters {} and {}",
                    partition.cluster_of(r),
                    partition.cluster_of(c)
                )));
            }
            set.insert((r, c));
        }
        let mut excluded_by_row = vec![Vec::new(); n];
        let mut excluded_by_col = vec![Vec::new(); n];
        for &(r, c) in &set {
            excluded_by_row[r].push(c);
            excluded_by_col[c].push(r);
        }
        for v in excluded_by_col.iter_mut() {
            v.sort_unstable();
        }
        Ok(Self {
            partition,
            excluded_by_row,
            excluded_by_col,
            zero_pairs: set.len(),
        })
    }

    /// Applies a recipe. `times` is required by the panel recipes and
    /// `coords` by the distance recipe.
    pub fn from_recipe(
        partition: ClusterPartition,
        recipe: &ExclusionRecipe,
        times: Option<&[i64]>,
        coords: Option<&[(f64, f64)]>,
    ) -> Result<Self> {
        let n = partition.n();
        let need_times = |times: Option<&[i64]>| -> Result<Vec<i64>> {
            let t = times.ok_or_else(|| {
                Error::InvalidExclusion("recipe requires per-observation time periods".into())
            })?;
            if t.len() != n {
                return Err(Error::InvalidExclusion(format!(
                    "expected {n} time periods, got {}",
                    t.len()
                )));
            }
            Ok(t.to_vec())
        };
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        match recipe {
            ExclusionRecipe::Unrestricted => {}
            ExclusionRecipe::WeakExogeneity => {
                let t = need_times(times)?;
                for i in 0..partition.num_clusters() {
                    let m = partition.members(i);
                    for &r in m {
                        for &c in m {
                            if t[r] > t[c] {
                                pairs.push((r, c));
                            }
                        }
                    }
                }
            }
            ExclusionRecipe::Horizon(h) => {
                let t = need_times(times)?;
                let h = i64::from(*h);
                for i in 0..partition.num_clusters() {
                    let m = partition.members(i);
                    for &r in m {
                        for &c in m {
                            let gap = t[r] - t[c];
                            if gap >= 1 && gap <= h {
                                pairs.push((r, c));
                            }
                        }
                    }
                }
            }
            ExclusionRecipe::Contemporaneous => {
                for i in 0..partition.num_clusters() {
                    let m = partition.members(i);
                    for &r in m {
                        for &c in m {
                            if r != c {
                                pairs.push((r, c));
                            }
                        }
                    }
                }
            }
            ExclusionRecipe::DistanceCutoff(radius) => {
                let xy = coords.ok_or_else(|| {
                    Error::InvalidExclusion("distance recipe requires coordinates".into())
                })?;
                if xy.len() != n {
                    return Err(Error::InvalidExclusion(format!(
                        "expected {n} coordinate pairs, got {}",
                        xy.len()
                    )));
                }
                if !radius.is_finite() || *radius < 0.0 {
                    return Err(Error::InvalidExclusion(format!(
                        "radius must be finite and nonnegative, got {radius}"
                    )));
                }
                for i in 0..partition.num_clusters() {
                    let m = partition.members(i);
                    for &r in m {
                        for &c in m {
                            if r == c {
                                continue;
                            }
                            let dx = xy[r].0 - xy[c].0;
                            let dy = xy[r].1 - xy[c].1;
                            if (dx * dx + dy * dy).sqrt() < *radius {
                                pairs.push((r, c));
                            }
                        }
                    }
                }
            }
        }
        Self::from_zero_pairs(partition, pairs)
    }

    /// Reads zero pairs from CSV with header `row,col` (0-based observation
    /// indices) and builds `E`.
    pub fn from_csv_zero_pairs<R: Read>(partition: ClusterPartition, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::InvalidExclusion(format!("missing CSV column '{name}'")))
        };
        let (ri, ci) = (find("row")?, find("col")?);
        let mut pairs = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let parse = |idx: usize| -> Result<usize> {
                record
                    .get(idx)
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::InvalidExclusion(format!("unparseable index in record {record:?}"))
                    })
            };
            pairs.push((parse(ri)?, parse(ci)?));
        }
        Self::from_zero_pairs(partition, pairs)
    }

    /// Reads zero pairs from a CSV file path.
    pub fn from_csv_zero_pairs_path(
        partition: ClusterPartition,
        path: impl AsRef<Path>,
    ) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_zero_pairs(partition, file)
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.partition.n()
    }

    /// The underlying partition.
    pub fn partition(&self) -> &ClusterPartition {
        &self.partition
    }

    /// True when `E[r, c] = 0`.
    pub fn is_excluded(&self, r: usize, c: usize) -> bool {
        self.excluded_by_row[r].binary_search(&c).is_ok()
    }

    /// Column indices `l` with `E[r, l] = 0`, ascending.
    pub fn excluded_in_row(&self, r: usize) -> &[usize] {
        &self.excluded_by_row[r]
    }

    /// Row indices `l~` with `E[l~, c] = 0`, ascending.
    pub fn excluded_in_col(&self, c: usize) -> &[usize] {
        &self.excluded_by_col[c]
    }

    /// Total number of zero pairs.
    pub fn zero_pair_count(&self) -> usize {
        self.zero_pairs
    }

    /// Share of within-cluster block area carrying a zero.
    pub fn zero_share_within(&self) -> f64 {
        let area = self.partition.within_block_area();
        if area == 0 {
            0.0
        } else {
            self.zero_pairs as f64 / area as f64
        }
    }

    /// Keep-mask for row `r`: `mask[l] = (E[r, l] == 1)`.
    pub fn keep_mask_for_row(&self, r: usize) -> Vec<bool> {
        let mut mask = vec![true; self.n()];
        for &c in &self.excluded_by_row[r] {
            mask[c] = false;
        }
        mask
    }

    /// Keep-mask for column `c`: `mask[l~] = (E[l~, c] == 1)`.
    pub fn keep_mask_for_col(&self, c: usize) -> Vec<bool> {
        let mut mask = vec![true; self.n()];
        for &r in &self.excluded_by_col[c] {
            mask[r] = false;
        }
        mask
    }

    /// The transposed indicator (`E'[r, c] = E[c, r]`).
    pub fn transpose(&self) -> Self {
        Self {
            partition: self.partition.clone(),
            excluded_by_row: self.excluded_by_col.clone(),
            excluded_by_col: self.excluded_by_row.clone(),
            zero_pairs: self.zero_pairs,
        }
    }

    /// Iterates over all zero pairs `(row, col)`.
    pub fn iter_zero_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.excluded_by_row
            .iter()
            .enumerate()
            .flat_map(|(r, cols)| cols.iter().map(move |&c| (r, c)))
    }

    /// Re-checks the structural invariants (diagonal kept, zeros within
    /// clusters only, both index directions consistent).
    pub fn validate(&self) -> Result<()> {
        for (r, cols) in self.excluded_by_row.iter().enumerate() {
            for &c in cols {
                if r == c {
                    return Err(Error::InvalidExclusion(format!("diagonal zero at {r}")));
                }
                if !self.partition.same_cluster(r, c) {
                    return Err(Error::InvalidExclusion(format!(
                        "cross-cluster zero at ({r}, {c})"
                    )));
                }
                if self.excluded_by_col[c].binary_search(&r).is_err() {
                    return Err(Error::InvalidExclusion(format!(
                        "column index missing pair ({r}, {c})"
                    )));
                }
            }
        }
        let count: usize = self.excluded_by_row.iter().map(Vec::len).sum();
        let count_c: usize = self.excluded_by_col.iter().map(Vec::len).sum();
        if count != self.zero_pairs || count_c != self.zero_pairs {
            return Err(Error::InvalidExclusion(
                "inconsistent zero-pair bookkeeping".into(),
            ));
        }
        Ok(())
    }
}
