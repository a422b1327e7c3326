//! The encoder-decoder compression model.

mod config;
mod forward;
mod generate;
mod layer_map;
mod weights;

#[cfg(test)]
mod tests;

pub use config::{compressed_len, ModelConfig, PositionalScheme};
pub use forward::{compressed_indices, segment_sequence, CompressedState, CompressedVars, SegmentCache};
pub use generate::{argmax_lowest, DecodeMode, DecoderSession, Generation};
pub use layer_map::{LayerMap, LayerMapMode};
pub use weights::{BlockIds, DecoderIds, EncoderIds, RccModel, ENCODER_PREFIX};
