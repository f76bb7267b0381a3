//! Numerical core for two-stage semi-supervised multi-objective training of
//! conditional diffusion models and diffusion policies.
//!
//! Everything in this crate is a pure function of its inputs and an explicit
//! seeded random stream. File formats, configuration parsing, the worker pool
//! and the command-line front end live in the `semidiff-lab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod math;
pub mod mdp;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod scalarization;
pub mod task;

pub use diffusion::{LossEstimate, Schedule, ScoreField};
pub use error::{Error, Result};
pub use model::{ModelClassSpec, ScoreModel};
pub use scalarization::Scalarization;
pub use task::ConditionalTask;
