//! Influence-weighted dataset distillation.
//!
//! The crate distills small real datasets into synthetic sets under a
//! statistic-matching objective, scores every real instance by how much
//! upweighting it moves that objective, and turns the scores into training
//! weights. Everything is built on a small reverse-mode autodiff graph with
//! second-order support.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled; the `std` feature only adds rayon-backed parallel scoring.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ad;
pub mod data;
pub mod engine;
mod error;
pub mod influence;
pub mod linalg;
pub mod matching;
pub mod math;
pub mod models;
pub mod par;
pub mod rng;
pub mod stats;
pub mod weighting;

pub use error::{Error, Result};
