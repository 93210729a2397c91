//! Pathology report generation pipeline: synthetic corpus tooling, rule-based
//! report parsing, multi-scale region features, self-distilled visual
//! encoders, a tag-conditioned language model, and evaluation utilities.

pub mod config;
pub mod corpus;
pub mod dino;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod harness;
pub mod mrvit;
pub mod parsing;
pub mod regions;
pub mod seeds;

pub use error::{PipelineError, Result};
