#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cgp;
pub mod cli;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod linop;
pub mod normal;
pub mod placement;
pub mod tmvn;
mod optim;

pub use error::{Error, Result};
