pub mod arch;
pub mod archive;
pub mod autograd;
pub mod data;
pub mod efficiency;
pub mod error;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
