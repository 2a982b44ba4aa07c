//! Token-level knowledge transfer between language models.
//!
//! Scores response tokens by how much an adapter-equipped expert outranks its
//! own base model, keeps the most informative samples and tokens, carries
//! token masks across tokenizers, and writes masked training data. The
//! [`toylab`] module provides bigram stand-ins for every model role so the
//! whole flow runs deterministically on a laptop.

pub mod alignment;
pub mod datamodel;
pub mod error;
pub mod excess;
pub mod filtering;
pub mod pipeline;
pub mod synthgen;
pub mod toylab;

pub use error::{Error, Result};
