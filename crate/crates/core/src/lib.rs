//! Prompt fusion, order-aligned query selection, DETR-style set losses and
//! dual-path annotation cross-verification, each paired with a brute-force or
//! finite-difference oracle.

pub mod align;
pub mod cli;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod numeric;
pub mod order;
pub mod prompt;

pub use error::{Error, Result};
