//! Core algorithms for dual-network co-training on 3D volumes.
//!
//! Everything in this crate is pure computation on in-memory grids: the two
//! encoder–decoder subnets with hand-written backward passes, every training
//! objective with analytic gradients, the pseudo-label / mask machinery, a
//! deterministic synthetic dataset generator, SGD with schedules, and the
//! evaluation metrics (Dice, Jaccard, HD95, ASD) with sliding-window
//! inference. File formats, checkpoints and the CLI live in the companion
//! `covox` crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std`
//! feature enables `rayon`-backed parallel convolution kernels. Parallel and
//! serial execution produce bit-identical results: every output element is
//! written by exactly one task and reduction order never depends on thread
//! count.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod net;
mod par;
pub mod pseudo;
pub mod real;
pub mod rng;
pub mod synth;
pub mod train;
pub mod vox;

pub use error::{Error, Result};
pub use real::Real;
