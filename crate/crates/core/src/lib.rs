pub mod attention;
pub mod bench;
pub mod box_agent;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod matcher;
pub mod nn;
pub mod numerics;
pub mod selftest;

pub use error::{Error, Result};
