//! Multilingual neural machine translation with lightweight decoders.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod lang;
pub mod model;
pub mod profile;
pub mod subword;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use lang::{Direction, Lang};
