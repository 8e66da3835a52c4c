//! Attentional sequence-to-sequence translation with latent-variable
//! decoders, built on a minimal reverse-mode autodiff tape.
//!
//! Three decoder families share one encoder and attention mechanism:
//!
//! - a deterministic attentional baseline,
//! - `SENT`, with a single sentence-level Gaussian latent variable, and
//! - `SDEC`, a stochastic decoder with one latent variable per target
//!   position forming a conditioned chain.
//!
//! The latent models are trained by maximizing a KL-annealed ELBO with
//! reparametrized sampling and a look-ahead inference network. The
//! `book/` directory walks through each concept with runnable snippets.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod guide;
pub mod inference;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
