//! Token filtering for vision transformers driven by per-token delta loss.

pub mod bench;
pub mod data;
pub mod dl;
pub mod error;
pub mod filter;
pub mod flops;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
