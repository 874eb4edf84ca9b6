//! Open-vocabulary land-cover segmentation at desk scale.

pub mod autograd;
pub mod container;
pub mod data_synth;
pub mod error;
pub mod fusion_encoder;
pub mod hf_extract;
pub mod inference_fusion;
pub mod kv;
pub mod model;
pub mod nn;
pub mod params;
pub mod parallel;
pub mod plot;
pub mod resample;
pub mod seg_decoder;
pub mod spectral_embed;
pub mod taxonomy;
pub mod tensor;
pub mod text_prompter;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
