//! Shared fixtures for the criterion benchmarks.

use clusteriv::{
    build_astar, build_projection, CenteringMatrix, CenteringMethod, CenteringMode,
    ClusterPartition, ClusteredDataset, ControlMatrix, ExclusionMatrix, ExclusionRecipe,
    ProjectionMatrix,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A balanced lagged-outcome panel fixture: `clusters` clusters of `periods`
/// observations with cluster-indicator controls and the weak-exogeneity
/// exclusion pattern.
pub struct PanelFixture {
    pub partition: ClusterPartition,
    pub projection: ProjectionMatrix,
    pub exclusion: ExclusionMatrix,
    pub data: ClusteredDataset,
}

impl PanelFixture {
    pub fn new(clusters: usize, periods: usize, seed: u64) -> Self {
        let partition = ClusterPartition::balanced(clusters, periods).unwrap();
        let n = partition.n();
        let controls = ControlMatrix::group_indicators(partition.assignment().to_vec()).unwrap();
        let projection = build_projection(controls.clone()).unwrap();
        let times: Vec<i64> = (0..n).map(|l| (l % periods) as i64).collect();
        let exclusion = ExclusionMatrix::from_recipe(
            partition.clone(),
            &ExclusionRecipe::WeakExogeneity,
            Some(&times),
            None,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(n, |l, _| 0.5 * x[l] + rng.random::<f64>() - 0.5);
        let data = ClusteredDataset::new(y, x, controls, partition.clone()).unwrap();
        Self {
            partition,
            projection,
            exclusion,
            data,
        }
    }

    pub fn astar(&self, method: CenteringMethod) -> CenteringMatrix {
        build_astar(
            &self.projection,
            &self.exclusion,
            CenteringMode::Outcome,
            method,
        )
        .unwrap()
    }
}
