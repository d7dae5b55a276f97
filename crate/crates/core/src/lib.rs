//! Problem-gambling detection pipeline for forum posts.
//!
//! The crate covers the whole path from a raw forum dump to cross-validated
//! classifier reports:
//!
//! * [`corpus`] stores posts and computes descriptive statistics.
//! * [`stats`] and [`sampling`] provide word-token counting, Welch's t-test and
//!   length-matched weighted sampling.
//! * [`annotation`] holds the criteria catalog, label resolution, blind export
//!   and training-set assembly.
//! * [`text_prep`] and [`features`] turn texts into model inputs (subword
//!   sequences, TF-IDF vectors) and build the balanced dataset variants.
//! * [`classifiers`] contains a logistic-regression baseline and a small
//!   transformer encoder with a linear classification head.
//! * [`evaluation`] runs k-fold cross-validation, computes metrics and performs
//!   lexicon-based error analysis.
//! * [`experiment`] ties the stages together behind a JSON configuration.

pub mod annotation;
pub mod classifiers;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod sampling;
pub mod seed;
pub mod stats;
pub mod synthetic;
pub mod text_prep;
pub mod tokenize;

pub use error::{Error, Result};
