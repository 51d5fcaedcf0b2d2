//! Wide 3D scene generation by flow sampling on an extended latent with
//! overlapping patch-wise vector fields, dilated sampling, optimization
//! guided by a scene prior, and iterative partial re-noising.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod decode;
pub mod error;
pub mod fixtures;
pub mod flowcore;
pub mod lattice;
pub mod optimizer;
pub mod patchwork;
pub mod pipeline;
pub mod ply;
pub mod priors;
pub mod structedit;

pub use error::{Error, Result};
