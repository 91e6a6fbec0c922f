pub mod codec;
pub mod config;
pub mod error;
pub mod lab;
pub mod ndmath;
pub mod model;
pub mod pool;
pub mod trainer;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
