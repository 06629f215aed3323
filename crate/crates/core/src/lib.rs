//! Class-correlation learning.
//!
//! A classifier is trained together with a small head that learns one
//! embedding per class. Distances between those class embeddings are turned
//! into per-class soft label distributions, which regularize the classifier
//! through a KL term. The crate carries its own reverse-mode autodiff so that
//! every loss can be gradient-checked in double precision.

// `!(x >= 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod error;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
