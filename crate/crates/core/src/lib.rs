//! Multi-task laughter understanding with mixture-of-laugh-experts (MoLE)
//! low-rank adapters.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod mole;
pub mod numerics;
pub mod selfinstruct;
pub mod train;

pub use error::{Error, Result};
