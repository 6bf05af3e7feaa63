//! Scene-conditioned captioning decoder with tensor-factored attention.
//!
//! Two stacked LSTMs decode a caption; the attention projection of the
//! first layer's hidden state is factored as `U_h * diag(v_scene) * V_h`,
//! so the scene posterior of an image reshapes where the model looks.
//! Training mixes the cross-entropies of both layers' word distributions
//! and can be followed by self-critical fine-tuning against CIDEr-D.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
