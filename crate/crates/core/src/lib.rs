//! Speech act recognition for conversations.
//!
//! Sentences of a conversation are encoded by a hierarchical bi-LSTM (a
//! word-level layer producing sentence vectors, a conversation-level layer
//! producing context-aware vectors) and tagged with one of five speech acts
//! through either an independent Softmax classifier or a linear-chain CRF.
//! A domain discriminator trained through gradient reversal adapts the
//! encoder across domains (meeting transcripts vs. forum threads).
//!
//! Everything runs on a small define-by-run f64 autodiff engine; no
//! external ML framework is involved.

pub mod adversary;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod output;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
