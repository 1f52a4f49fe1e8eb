pub mod corpus;
pub mod decode;
pub mod error;
pub mod evalkit;
pub mod instruct;
pub mod tokenizer;
pub mod lm;
pub mod quant;
pub mod train;

pub use error::{Error, Result};
