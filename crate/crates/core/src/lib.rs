#![no_std]
//! Learning controllable and uncontrollable latent partitions from pixels.
//!
//! The crate is `no_std` + `alloc`: it holds the numerical machinery
//! (reverse-mode graph, optimizers), the three pixel environments, the
//! networks and training objectives, the latent planner and the evaluation
//! probes. File formats, the CLI and run orchestration live in the
//! `ctrlsplit` companion crate.

extern crate alloc;

pub mod envs;
pub mod error;
pub mod evalviz;
pub mod graph;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod planner;
pub mod real;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Frozen, Gradients, Graph, NodeId};
pub use optim::{ema_update, Adam};
pub use params::ParamSet;
pub use real::Real;
pub use tensor::Tensor;
