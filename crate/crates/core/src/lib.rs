#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classmixpp;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod gmc;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod plgcl;
pub mod scenegen;

pub use error::{Error, Result};
