//! Deep metric embeddings trained with identification loss plus center
//! loss, with an optional feature-reweighting (FRW) layer, built on a small
//! reverse-mode autodiff engine. Includes synthetic identity data,
//! augmentation, Adam training, two-step fine-tuning, and single-shot CMC
//! evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kv;
pub mod layers;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
