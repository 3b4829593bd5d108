//! Detection of generated videos from normalized spatiotemporal gradients.

pub mod detector;
pub mod experiment;
pub mod kernel;
pub mod manifest;
pub mod mmd;
pub mod nsg;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod theory;
