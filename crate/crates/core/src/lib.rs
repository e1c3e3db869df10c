pub mod attention;
pub mod brownian;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod kfac;
pub mod markov;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
