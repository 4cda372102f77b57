#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod error;
pub mod estep;
pub mod factor;
pub mod fit;
pub mod io;
pub mod orthant;
pub mod qmc;
pub mod selection;
pub mod quad;
pub mod special;

pub use error::{Error, Result};
