//! Caption preprocessing, dataset files and the synthetic generator.

pub mod manifest;
pub mod sfat;
pub mod synth;
pub mod vocab;
