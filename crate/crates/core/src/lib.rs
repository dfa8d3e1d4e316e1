pub mod error;
pub mod graph;
pub mod inference;
pub mod interaction;
pub mod kld;
pub mod model;
pub mod priors;
pub mod spectral;
pub mod structure;

pub use error::{Result, VpError};
pub use graph::AdjacencyGraph;
pub use interaction::{build_interaction, InteractionModel, InteractionType};
pub use structure::{icar_structure, rw_structure, scale_structure, StructureKind, StructureMatrix};
