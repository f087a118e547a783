//! Desk-scale continuous text diffusion with position-dependent token
//! timesteps.
//!
//! The pieces, bottom up:
//!
//! - [`schedule`]: noise-coefficient tables and the point-slope token-level
//!   timestep function with its anchor geometry.
//! - [`diffusion`]: embedding-space forward noising, the multi-step reverse
//!   posterior used for skipping, and the training loss.
//! - [`autograd`] / [`model`]: a tape-based reverse-mode engine and the small
//!   encoder-decoder denoiser built on it.
//! - [`train`]: the training loop (timestep sampling, Adam, divergence
//!   recovery).
//! - [`infer`]: skipping inference over a decreasing timestep subsequence,
//!   candidate generation, and MBR selection.
//! - [`eval`]: smoothed BLEU, SELF-BLEU, exact match, and few-step reports.
//! - [`data`], [`config`], [`checkpoint`], [`cli`]: corpus and vocabulary
//!   handling, flat key=value configuration, the checkpoint container, and
//!   the command-line front end.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
