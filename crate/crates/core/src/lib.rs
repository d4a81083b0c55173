//! Test-time prompt fusion for adapting dual-encoder classifiers to open
//! classes.
//!
//! A shared block of prompt context vectors is tuned on a few labelled
//! samples of the base classes. At test time each input is scored with the
//! learned prompts over the base classes and with hand-crafted prompts over
//! the new classes, and the two scores set a per-input weight that blends
//! the learned and hand-crafted prompts before classifying over all classes.

pub mod archive;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod linalg;
pub mod math;
pub mod scoring;
pub mod seed;
pub mod tuning;

pub use error::{Category, Error, Result};
