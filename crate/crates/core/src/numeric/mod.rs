//! Minimal differentiable numerical substrate: dense matrices, the
//! operations the model needs, reverse-mode gradients, AdamW, and
//! finite-difference gradient checking.

mod gradcheck;
mod matrix;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use optim::AdamW;
pub use params::{Param, ParamId, ParamSet};
pub use tape::{NodeId, ScatterEntry, Tape};

#[cfg(test)]
mod tape_tests;
