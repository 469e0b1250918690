//! Tensors, reverse-mode differentiation, elementwise and normalization
//! kernels, and the finite-difference gradient oracle.

mod finite_diff;
mod functional;
mod graph;
mod rng;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use functional::{
    argmax, cosine_similarity, gelu_scalar, gelu_tanh, group_norm, gumbel_softmax, layer_norm,
    log_sum_exp, perplexity, softmax, weight_norm, GumbelDraw, NORM_EPS,
};
pub use graph::{conv_out_len, ctc_min_frames, Gradients, Graph, Var};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
