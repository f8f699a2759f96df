//! Multi-aspect, multi-granularity pronunciation assessment.
//!
//! The crate scores speech at the phoneme, word, and utterance level from
//! goodness-of-pronunciation feature vectors, using a hierarchical encoder
//! whose per-aspect scoring modules are coupled by multi-aspect attention.
//! It is self-contained: [`tensor`] provides dense f64 tensors with
//! reverse-mode automatic differentiation, [`optim`] the Adam optimizer,
//! [`nn`] the neural layers, [`model`] the network and loss, [`data`] the
//! dataset format and synthetic oracle, [`metrics`] pooled evaluation,
//! [`inspect`] attention-weight extraction, [`checkpoint`] versioned
//! serialization, and [`train`] the training loop.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
