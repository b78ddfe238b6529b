//! Model configurations, parameter accounting and the encoder itself.

mod config;
mod model;
mod params;

pub use config::*;
pub use model::*;
pub use params::*;
