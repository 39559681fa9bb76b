//! Long-tailed continual learning with uncertainty-guided replay.
//!
//! The crate is organized bottom-up:
//!
//! - [`net`]: dense MLP encoder, linear / scaled-cosine heads, backpropagation.
//! - [`stream`]: power-law task streams over synthetic or file-loaded pools.
//! - [`uncertainty`]: MC-dropout posterior, predictive entropy, mutual information.
//! - [`buffer`]: the replay memory with vanilla and uncertainty-guided policies.
//! - [`objectives`]: classification, boundary and prototype distillation losses.
//! - [`metrics`] and [`harness`]: training loop, evaluation and run artifacts.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod report;
pub mod seed;
pub mod stream;
pub mod uncertainty;

pub use error::{Error, Result};
