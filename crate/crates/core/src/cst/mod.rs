//! Convolutional Swin Transformer (CST) block.
//!
//! A block is a pre-norm windowed attention branch followed by a
//! feed-forward branch, each gated by a learnable per-channel layer scale.
//! Blocks come in pairs: regular windows, then windows shifted by `M / 2`.

mod attention;
mod block;
mod ffn;
mod window;

pub use attention::{
    attention_probs, Cmsa, OutputProj, QkvProj,
};
pub use block::{CstBlock, CstLayer, LAYER_SCALE_INIT};
pub use ffn::FeedForward;
pub use window::{
    attention_mask, cyclic_shift, masked_pairs, relative_position_index, shift_region_ids,
    window_partition, window_reverse, WindowGrid, MASK_VALUE,
};

/// Variant switches inside a CST block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    /// Depthwise-conv Q/K/V (else one linear `d -> 3d`).
    pub conv_projection: bool,
    /// Learnable relative position bias added to attention logits.
    pub bias_table: bool,
    /// Depthwise 3x3 refinement after attention (else a linear projection).
    pub conv_refine: bool,
    /// Depthwise-separable feed-forward (else an MLP).
    pub dsf: bool,
}

impl BlockOptions {
    pub const FULL: BlockOptions = BlockOptions {
        conv_projection: true,
        bias_table: false,
        conv_refine: true,
        dsf: true,
    };
}
