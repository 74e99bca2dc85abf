//! Space partitioner: residual trunk, logit layer and clustering loss.

pub mod model;
pub mod objective;
pub mod train;
pub mod trunk;

pub use model::{
    argmax, block_c0, trunk_c0, LipschitzCertificate, PartitionerBinds, PartitionerModel, PartitionerTrunk,
};
pub use objective::{categorical_entropy, clustering_objective, clustering_objective_graph, ClusterLossWeights};
pub use train::{
    farthest_point_seeds, init_partitioner, train_partitioner, HeadInit, PartitionerConfig, PartitionerTraining,
    TrunkKind,
};
pub use trunk::{ResidualBlock, ResidualTrunk, TrunkShape, TRUNK_ACTIVATION};
