//! Target-aware debiasing for binary text classifiers.
//!
//! A hypernetwork turns a target indicator (the mean word vector of a target
//! name) into a low-rank filter that strips target information from a post
//! embedding. Filters are trained adversarially against a multi-label target
//! discriminator, and because they are generated from word vectors they can be
//! produced for targets never seen in training.

pub mod error;
pub mod data;
pub mod embeddings;
pub mod heads;
pub mod hyperfilter;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
