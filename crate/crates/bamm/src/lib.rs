//! Motion tokenizer, hybrid-mask transformer, cascaded decoding and editing
//! over synthetic skeletal motion.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod editor;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod service;
pub mod tokenizer;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
