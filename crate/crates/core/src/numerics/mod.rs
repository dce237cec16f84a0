//! Dense vectors and matrices, a small MLP with hand-written backward
//! passes, the loss primitives, and the adaptive-moment optimizer.

mod gradcheck;
mod mlp;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, DEFAULT_STEP};
pub use mlp::{dropout_mask, Dropout, Mlp, MlpCache, MlpSpec, DEFAULT_NEGATIVE_SLOPE};
pub use ops::{
    cross_entropy, entropy, interpolate, is_probability_vector, l2_normalize,
    l2_normalize_backward, one_hot, softmax, softmax_cross_entropy_grad, SoftLabel, LOG_FLOOR,
    NORM_FLOOR,
};
pub use optim::{optimizer_step, AdamConfig, OptimMode};
pub use params::{ParamBlock, ParamStore};
pub use tensor::{argmax, distance, dot, norm, squared_distance, Tensor2D, Vector};
pub(crate) use tensor::ensure_finite;
