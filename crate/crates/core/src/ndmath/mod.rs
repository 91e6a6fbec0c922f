//! Dense-network math for the encoder/decoder pair: vector primitives,
//! a two-layer perceptron with manual backward, Adam, the cosine schedule and
//! a central-difference gradient checker.

pub mod gradcheck;
pub mod mlp;
pub mod ops;
pub mod optim;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use mlp::{Activation, DenseGrad, DenseLayer, Mlp2, MlpCache, MlpGrad, Parameters};
pub use ops::{
    cosine_similarity, cosine_with_grad, dot, kl_divergence, norm, normalize,
    normalize_backward, softmax, Cosine, KL_EPSILON,
};
pub use optim::{adam_step, cosine_lr, AdamState, LrSchedule};
