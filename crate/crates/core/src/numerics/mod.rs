//! Dense linear algebra, seeded randomness, optimizer and gradient checking.

mod gradcheck;
mod matrix;
mod ops;
mod optim;
mod rng;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use matrix::{axpy, dot, Matrix};
pub use ops::{
    layer_norm, layer_norm_backward, layer_norm_with_cache, log_sum_exp, softmax_row,
    LayerNormCache, LAYER_NORM_EPS,
};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use rng::{gaussian_matrix, streams, SeededRng};
