//! Minimal double-precision neural network toolkit: dense matrices, a
//! reverse-mode tape, parameter storage, layers and AdamW.

pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use mat::Mat;
pub use optim::{AdamConfig, AdamW};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
