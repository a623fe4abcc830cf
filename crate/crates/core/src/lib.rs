//! Global-to-local knowledge selection for background-based conversation.
//!
//! A background document and a conversational context are encoded with
//! bidirectional GRUs. A global selector scores non-overlapping windows of the
//! background ("semantic units") against the context and summarises them into
//! a topic transition vector, which then guides a pointer-generator decoder
//! that either generates from the vocabulary or copies background tokens.
//!
//! Everything is differentiated by the small reverse-mode engine in [`tape`].

pub mod data;
pub mod double;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GlksError, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{EmptyRow, Grads, Tape, Var};
pub use tensor::{Scalar, Tensor};
