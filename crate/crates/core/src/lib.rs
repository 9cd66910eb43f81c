//! Learning which symmetry a dataset has: invariant linear layers built from
//! permutation groups, mixed through a learned distribution over candidate
//! groups and fit by MAP estimation.

pub mod bayes;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod layers;
pub mod symmetry;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
