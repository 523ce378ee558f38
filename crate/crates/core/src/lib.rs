//! Link-level MIMO channel simulation: TDL, CDL and reduced-CDL channel
//! generators together with the evaluation stack used to compare them
//! (Bartlett spatial profiles, SVD eigenmodes, Type-I / eType-II CSI
//! codebooks and an MIESM link abstraction).
//!
//! Every generator produces a [`ChannelTensor`] indexed
//! `(time, subcarrier, rx port, tx port)`; every evaluator consumes one.

pub mod analysis;
pub mod antenna;
pub mod cdl;
pub mod csi;
pub mod geometry;
pub mod harness;
pub mod linkabs;
pub mod rcdl;
pub mod seed;
pub mod tdl;
pub mod tensor;

pub use tensor::{CMat, ChannelTensor};
