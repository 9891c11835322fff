//! Speaker embedding toolkit built around the C2D-Att channel-frequency
//! attention module.
//!
//! The crate is self-contained: a small dense tensor engine with reverse-mode
//! autodiff ([`autograd`]), a log mel-filterbank front-end ([`frontend`]),
//! the attention modules ([`attention`]), the ResNet embedding network
//! ([`model`]), AAM-softmax training ([`train`]) and trial scoring with
//! EER / minDCF ([`scoring`]).

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod frontend;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
