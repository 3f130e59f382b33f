#![no_std]

extern crate alloc;

pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod haze;
pub mod idn;
pub mod igm;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod tfga;

pub use error::{Error, Result};
