//! Conversational response generation over retrieved passages.
//!
//! A shared transformer encoder reads the query history and each candidate
//! passage; two coattention blocks feed a passage relevance scorer and a
//! supporting-token scorer, and a pointer-generator decoder mixes vocabulary
//! generation with copying from the query and the passages, weighted by the
//! scorers' outputs.

pub mod checkpoint;
pub mod coattention;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rps;
pub mod stats;
pub mod synthetic;
pub mod sti;
pub mod trainer;
pub mod vocab;

pub use error::{CaseError, Result};
