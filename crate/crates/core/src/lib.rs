pub mod data;
pub mod dists;
pub mod el;
mod error;
pub mod hmc;
pub mod model;
pub mod selection;

pub use error::{BenelError, Result};
