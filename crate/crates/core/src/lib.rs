#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod capsnet;
pub mod cli;
pub mod data;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
