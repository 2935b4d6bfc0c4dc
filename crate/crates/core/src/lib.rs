//! Similar-language neural machine translation built from scratch.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod pipeline;
pub mod search;
pub mod subword;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
