pub mod alignnet;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod lightcontrol;
pub mod mmdit;
pub mod nn;
pub mod params;
pub mod seed;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
