pub mod autodiff;
pub mod compensated;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod fft;
pub mod finetune;
pub mod offline;
pub mod policy;
pub mod ssm;
pub mod stability;
pub mod verify;

pub use error::{Error, Result};
