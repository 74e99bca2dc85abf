//! Evaluation metrics and analytic theorem verifiers.

pub mod capped;
pub mod modes;
pub mod normal;
pub mod theorems;

pub use capped::{verify_thm1_empirically, CappedGanConfig, CappedGanReport};
pub use modes::{marginal_tv, mode_report, nearest_mode, nmi, reverse_kl, ModeReport};
pub use normal::{normal_cdf, normal_cdf_inv};
pub use theorems::{
    delta_bound, jsd, jsd_decomposition_check, DecompositionCase, DecompositionResult, PartitionBlock,
    TheoremOneInstance,
};
