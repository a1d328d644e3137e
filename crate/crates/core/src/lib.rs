//! Scene-graph learning at desk scale: an unrolled graph-denoising message
//! passing stack with robust attention reweighting, diversity-regularized
//! relationship prediction, a synthetic benchmark generator, and a small
//! training/evaluation pipeline — all on a hand-rolled dense reverse-mode
//! tape.

pub mod denoise;
pub mod diversity;
pub mod error;
pub mod matrix;
pub mod mp;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
pub use matrix::{lu_solve, DenseMatrix, ElemKind};
pub use tape::{row_softmax_value, NodeId, Tape};
