//! Dense numeric kernel: MLP encoder, classifier heads, backpropagation and SGD.

mod matrix;
mod model;
mod ops;

pub use matrix::DenseMatrix;
pub(crate) use model::project_out;
pub use model::{
    sgd_step, DenseLayer, DropoutMask, Forward, Gradients, Head, HeadKind, ModelState, NetSpec,
    TeacherSnapshot, Trace, WeightNorm,
};
pub use ops::{argmax, dot, l2_norm, log_softmax_temp, normalize, softmax_temp, NORM_TOLERANCE};
pub(crate) use ops::{normalize_in, softmax_unchecked};
