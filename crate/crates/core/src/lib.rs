//! Partition-guided mixture GANs for synthetic disconnected-manifold data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod ganmix;
pub mod guide;
pub mod io;
pub mod metrics;
pub mod numcore;
pub mod partitioner;
pub mod pipeline;
pub mod plot;
pub mod synthdata;

pub use error::{Error, Result};
