//! Multi-frame visual relocalization: relative-pose token injection into an
//! alternating frame/global attention transformer, sparse frame-level
//! attention masks, motion averaging from relative to absolute poses, and
//! the pose evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod sim;
pub mod tokenizer;

pub use error::{Error, Result};
