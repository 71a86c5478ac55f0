//! Masked-reconstruction transformer encoder: parameters, forward and
//! backward passes, focal loss, Adam, training, checkpoints and a
//! finite-difference gradient oracle.

pub mod adam;
pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod params;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use forward::{backward, forward, Cache, Dropout, LayerDropout};
pub use loss::{bce, focal_loss, sigmoid};
pub use params::{apply_mask, init_params, Layout, MaskedInput, Params};
pub use train::{train, TrainConfig};

/// Model width.
pub const D_MODEL: usize = 64;
pub const N_LAYERS: usize = 2;
pub const N_HEADS: usize = 4;
pub const HEAD_DIM: usize = D_MODEL / N_HEADS;
/// Hidden width of the position-wise feed-forward block.
pub const D_FF: usize = 2 * D_MODEL;
/// Variance floor inside layer norm.
pub const LN_EPS: f64 = 1e-12;

/// Closed-form parameter count for input width `D` and window length `L`.
pub const fn parameter_count(input_width: usize, window_len: usize) -> usize {
    let d = D_MODEL;
    let layer = 4 * d * d + 2 * d + D_FF * d + D_FF + d * D_FF + d + 2 * d;
    d * input_width + d + window_len * d + 1 + N_LAYERS * layer + input_width * d + input_width
}
