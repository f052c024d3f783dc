//! Reverse-mode automatic differentiation over a flat parameter store.
//!
//! Training state lives in a [`ParamStore`]: one contiguous `f64` buffer for
//! values and a parallel buffer for gradients, carved into named blocks
//! (layer weights, grid tables, noise-amplitude grids). A [`Tape`] records a
//! vector-valued expression graph eagerly during the forward pass; its
//! [`Tape::backward`] pass scatters parameter gradients back into the store,
//! where [`Adam`] consumes them. Parameters are referenced by the tape, never
//! copied onto it, so large embedding tables cost only their touched rows.

mod adam;
mod checkpoint;
mod gradcheck;
mod store;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport, GradCheckWorst};
pub use store::{BlockId, ParamStore};
pub use tape::{NodeId, Tape};

pub(crate) use tape::reflect_axis;

use thiserror::Error;

/// Errors surfaced by the differentiation layer.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("loss node has {len} components, expected a scalar")]
    NonScalarLoss { len: usize },
    #[error("non-finite value during forward pass, first at node {node} ({op})")]
    NonFinite { node: u32, op: &'static str },
    #[error("non-finite gradient in parameter block '{block}'")]
    NonFiniteGrad { block: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
