pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod scenarios;

pub use error::{Error, Result};
