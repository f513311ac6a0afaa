//! Desk-scale laboratory for denoising-regularized prompt learning.
//!
//! A miniature frozen dual-encoder classifier is adapted through a small set
//! of learnable prompt vectors. Training perturbs those prompts with
//! schedule-annealed Gaussian-mixture noise (dynamic prompt denoising, DPD)
//! and regularizes the text-to-visual prompt mapper with a denoising
//! autoencoder loss. Everything runs on a hand-rolled f64 tape so every
//! gradient is checkable against central finite differences.
//!
//! Layout:
//! - [`diffcore`]: dense tensors, the fixed-op gradient tape, the checker
//! - [`prompts`]: prompt parameters and the frozen toy dual encoder
//! - [`noise`]: GMM noise generation and annealing schedules
//! - [`mapper`]: the trainable text-to-visual prompt map and its aux loss
//! - [`model`]: assembly of the above into one trainable state
//! - [`train`]: the SGD loop, step records, overhead accounting
//! - [`synthdata`]: compositional synthetic tasks with base/novel splits
//! - [`eval`]: base-to-novel metrics (accuracy, harmonic mean, macro-F1)
//! - [`config`], [`runner`], [`cli`]: run configuration and the command front end

pub mod cli;
pub mod config;
pub mod diffcore;
pub mod eval;
pub mod mapper;
pub mod model;
pub mod noise;
pub mod prompts;
pub mod rng;
pub mod runner;
pub mod synthdata;
pub mod train;
