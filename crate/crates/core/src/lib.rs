//! Vision-language transfer baseline for domain-generalized dense perception.
//!
//! The crate builds a controllable synthetic multi-domain world, pre-trains a
//! micro vision transformer with one of several paradigms, fine-tunes it for
//! segmentation or detection on a single source domain and evaluates it on
//! unseen target domains.

pub mod augment;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod image;
pub mod lemma1;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod pretrain;
pub mod train;

pub use error::{Error, Result};
