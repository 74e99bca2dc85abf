//! Contrastive pretext encoder and neighbour graph construction.

pub mod knn;
pub mod pretext;

pub use knn::{knn_graph, NeighborGraph};
pub use pretext::{
    contrastive_loss, contrastive_objective_graph, train_pretext, view_pairs, write_embeddings_csv, PretextConfig,
    PretextEncoder,
};
