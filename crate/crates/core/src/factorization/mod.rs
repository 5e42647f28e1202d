//! Clustering and Semi-NMF.

mod kmeans;
mod seminmf;

pub use kmeans::{kmeans, KMeans, KMeansResult, DEFAULT_RESTARTS};
pub use seminmf::{
    hard_assign, seminmf_init, seminmf_init_traced, seminmf_loss, FactorState, RIDGE,
};
