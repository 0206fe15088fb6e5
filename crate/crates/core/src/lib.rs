//! Depression-severity classification over social-media posts.
//!
//! The pipeline: [`textprep`] cleans raw posts, [`features`] derives the
//! auxiliary emotion/sentiment/medication vector, [`augment`] balances the
//! minority classes with masked-token insertions and substitutions,
//! [`encoder`] exposes per-layer CLS states from a transformer, [`model`]
//! pools those layers with learned weights, fuses the auxiliary features and
//! classifies, and [`trainer`] / [`evaluator`] run and score experiments.

pub mod augment;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod model;
pub mod seed;
pub mod textprep;
pub mod trainer;

pub use error::{Error, Result};
