//! Numeric substrate: reverse-mode autodiff, spectral normalization and
//! optimizers. Everything is dense `f64`.

pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tape;

pub use nn::{Dense, Mlp, SpectralNorm};
pub use optim::{AdamHyper, AdamState, MomentumSgd};
pub use params::{Bound, ParamId, ParamStore};
pub use spectral::{power_iteration, sigma_max, singular_values, spectral_normalize, spectral_scale, SpectralState};
pub use tape::{softmax_rows, Graph, Matrix, Unary, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one named stage of a seeded run.
pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}
