//! Divide-and-conquer image-set generation on a toy diffusion transformer,
//! with set-consistency evaluation and benchmark tooling.

pub mod bench;
pub mod clients;
pub mod evalkit;
pub mod model;
pub mod recaption;
pub mod setgen;
pub mod tensor;
