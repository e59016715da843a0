pub mod autograd;
pub mod daheads;
pub mod detcore;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod geometry;
pub mod layers;
pub mod metricreg;
pub mod raster;
pub mod revgrad;
pub mod seeds;
pub mod tensor;
pub mod toyscenes;
pub mod weathergen;

pub use error::{Error, Result};
