//! Modular multilingual sequence-to-sequence transformer, desk scale.
//!
//! A small encoder-decoder with per-language bottleneck modules and fixed
//! language routing, a synthetic multilingual corpus where language
//! identification is exact, training loops with freeze-configurable
//! fine-tuning, and evaluation utilities for cross-lingual transfer and
//! source-language hallucination analysis.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod freezing;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{LanguageId, Model, ModelConfig, Variant};
pub use tensor::Tensor;
