//! A desk-scale laboratory for continuing a causal language model with a
//! mixture-of-denoisers objective, end to end: byte-level tokens with
//! sentinel and mode markers, span/prefix corruption, packed prefix-LM
//! batches, a small dense transformer trained in two phases on one CPU,
//! greedy and infilling inference, and compute-vs-quality accounting.
//!
//! Module map:
//! - [`tokenizer`] — fixed byte vocabulary plus sentinels and mode tokens;
//! - [`denoiser`] — span and prefix corruption, the denoiser mixture;
//! - [`packer`] — example packing and per-segment prefix-LM masks;
//! - [`model`] — the transformer, loss, and hand-derived gradients;
//! - [`trainer`] — two-phase training loop, Adam, checkpoints, metrics;
//! - [`inference`] — greedy decoding, blank infilling, log-likelihood;
//! - [`eval`] — task suites, held-out loss probes, curves, savings;
//! - [`corpus`] — text loading and the synthetic template grammar;
//! - [`config`] — flat key-value run configuration;
//! - [`cli`] — the `ul2r` executable tying it all together.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod eval;
pub mod inference;
pub mod model;
pub mod packer;
pub mod tokenizer;
pub mod trainer;

pub use tokenizer::{TokenId, Vocab};
