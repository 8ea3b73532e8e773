//! Low-rank bandits with latent user mixtures.
//!
//! Users arrive one mini-session at a time, each session drawing a latent
//! class from the user's mixture weights. This crate provides the pieces to
//! learn in that setting and to measure how well it is done:
//!
//! - [`moments`]: importance-weighted second and third moment estimates built
//!   from uniform exploration sessions.
//! - [`rtp`] and [`features`]: whitening plus the robust tensor power method,
//!   recovering the class reward matrix from the moments.
//! - [`oful`]: the OFUL linear bandit and its perturbation diagnostics.
//! - [`env`]: the seeded latent-mixture environment and regret accounting.
//! - [`policies`]: the exploration-gated per-user OFUL policy and baselines.

pub mod als;
pub mod env;
pub mod error;
pub mod features;
pub mod linalg;
pub mod moments;
pub mod numfmt;
pub mod oful;
pub mod policies;
pub mod rng;
pub mod rtp;
mod serde_rows;

pub use error::{Error, Result};
