//! Differentiable computation substrate: dense tensors, a reverse-mode tape,
//! parameter storage, a seeded generator and finite-difference checks.
//!
//! All math runs in `f64`. Training may keep parameters rounded to `f32`
//! (see [`ParamStore::round_to_f32`]); gradient checks never do.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_gradcheck, GradCheck};
pub use graph::{Gradients, Graph, Var, OP_NAMES, PROB_FLOOR};
pub use layers::{
    activate, bigru_encode, conv1d_valid, layer_norm, linear_affine, mean_pool, mlp_apply, softmax_lastdim,
    tconv1d, Activation, BiGru, Conv1d, GruCell, LayerNorm, Linear, Mlp, TConv1d,
};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
