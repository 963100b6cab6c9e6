//! Self-organising prototype layer with spectral head growth, pruning and
//! temperature annealing, plus the experiment harness that exercises it.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over several parallel rows read better than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod baseline;
pub mod ddcl;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod incrt;
pub mod lyapunov;
pub mod numerics;

pub use error::{Error, Result};
