//! The book under `book/` rendered as rustdoc modules, so every code
//! block in it runs under `cargo test --doc`.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/tape.md")]
pub mod tape {}

#[doc = include_str!("../../../book/src/seq2seq.md")]
pub mod seq2seq {}

#[doc = include_str!("../../../book/src/latent.md")]
pub mod latent {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/decoding.md")]
pub mod decoding {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
