pub mod cache;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod retrieval;
pub mod stage1;
pub mod stage2;
pub mod sweep;
pub mod tokens;

pub use error::{Error, Result};
