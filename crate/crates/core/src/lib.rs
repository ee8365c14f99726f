//! Time-aware prompting toolkit for small sequence-to-sequence models:
//! Gregorian date handling, textual and linear timestamp prompts, a minimal
//! trainable encoder-decoder transformer, corpus construction from wikitext
//! revision histories, from-scratch text-generation metrics, synthetic
//! timestamp-dependent tasks, and an experiment harness with date
//! perturbation analysis.
//!
//! The numeric core is generic over the scalar type (f32 or f64) through
//! [`num::Scalar`]; the aliases below fix the two supported instantiations.

pub mod cli;
pub mod corpus;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod num;
pub mod prompts;
pub mod seeds;
pub mod synthtask;
pub mod temporal;
pub mod tokenizer;

/// f64 model parameters: the default for training and gradient checks.
pub type ModelParametersF64 = model::ModelParameters<f64>;
/// f32 model parameters: half the memory, adequate for inference.
pub type ModelParametersF32 = model::ModelParameters<f32>;
/// f64 linear prompt parameters.
pub type LinearPromptParamsF64 = prompts::LinearPromptParams<f64>;
/// f32 linear prompt parameters.
pub type LinearPromptParamsF32 = prompts::LinearPromptParams<f32>;
