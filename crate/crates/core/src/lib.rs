//! Desk-scale masked image generation with a learned shortcut over latent
//! feature dynamics.
//!
//! The pipeline: a small bidirectional transformer (the base model)
//! iteratively unmasks a token grid under a mask-ratio schedule; recorded
//! feature trajectories train a lightweight shortcut network that predicts
//! feature deltas; inference then runs a step budget where only B of the N
//! steps pay full model cost.

pub mod analysis;
pub mod basemodel;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod migm;
pub mod nn;
pub mod params;
pub mod rng;
pub mod shortcut;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
