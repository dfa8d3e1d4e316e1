//! Benchmark fixtures shared by the criterion benches.

use vpmap_core::model::{Dataset, Family, ModelSpec, VpModel};
use vpmap_core::{AdjacencyGraph, InteractionType};

/// Binomial type-IV model on a `rows x cols` lattice over `n_time` steps.
pub fn lattice_model(rows: usize, cols: usize, n_time: usize) -> VpModel {
    let graph = AdjacencyGraph::lattice(rows, cols).expect("lattice");
    let spec = ModelSpec::new(Family::Binomial, 1, InteractionType::IV, false, n_time, graph).expect("spec");
    VpModel::new(spec).expect("model")
}

/// Counts at a 2% rate on populations of 5000 in every cell.
pub fn flat_rate_data(model: &VpModel) -> Dataset {
    let n = model.n_cells();
    Dataset::new(model.n_time(), model.n_space(), vec![Some(100); n], vec![5000.0; n]).expect("data")
}
