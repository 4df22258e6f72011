//! Text-driven sentiment classification with user/product context.

pub mod corpus;
pub mod crosscontext;
pub mod encoder;
pub mod error;
pub mod params;
pub mod tape;
pub mod upinit;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
