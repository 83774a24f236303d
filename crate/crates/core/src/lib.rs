pub mod balance;
pub mod bergman;
pub mod bundle;
pub mod config;
pub mod error;
pub mod exact;
pub mod functionals;
pub mod geometry;
pub mod stability;
pub mod verify;

pub use error::{BmlError, Result};
