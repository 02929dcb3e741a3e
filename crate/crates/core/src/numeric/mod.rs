//! Dense matrices, probability transforms, similarity measures and seeded
//! randomness shared by every other module.

mod matrix;
mod ops;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    pair_distance,
    cosine_similarity, dot, l2_norm, l2_normalize, l2_normalize_rows, pairwise_distance,
    softmax, softmax_rows, squared_euclidean, Metric,
};
pub use rng::{derive_seed, RngState};
