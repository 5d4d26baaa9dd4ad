//! Harmonic sequence modelling: complex harmonic embeddings mixed by gated
//! harmonic convolution, an attention baseline, and the experiment drivers
//! built on them.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod datagen;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod protocols;
pub mod training;
