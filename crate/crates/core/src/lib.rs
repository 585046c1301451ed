//! Murmur detection from heart-sound recordings: corpus handling, window
//! construction, augmented views, dual-path encoders, pretraining
//! objectives, a prototype head and the training/evaluation harness.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod protohead;
pub mod signal;
pub mod stats;
pub mod views;
pub mod windows;

pub use error::{Error, Result};
