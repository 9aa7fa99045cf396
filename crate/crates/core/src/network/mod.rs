//! The U-shaped encoder/decoder segmentation network.

mod config;
mod model;

pub use config::{ModelConfig, ABLATION_METHODS};
pub use model::{
    depth_to_space, param_breakdown, space_to_depth, CsUnet, DecoderStage, Embedding, Encoded,
    EncoderStage, Head, SkipFusion, Upsample,
};
