use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token positions are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalScheme {
    #[default]
    Rotary,
    Learned,
}

/// Architecture hyperparameters for the encoder-decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Encoder segment length `W` in tokens.
    pub encoder_window: usize,
    /// Tokens summarized by one compressed vector (`r`).
    pub compression_rate: usize,
    /// Maximum uncompressed decoder input in tokens.
    pub decoder_budget: usize,
    pub max_segments: usize,
    #[serde(default)]
    pub positional: PositionalScheme,
    /// Expose the embedding output as compressed level 0.
    #[serde(default = "default_true")]
    pub include_embedding_level: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Decoder positional capacity. Defaults to
    /// `decoder_budget + max_segments * encoder_window / compression_rate`.
    #[serde(default)]
    pub max_positions: Option<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_true() -> bool {
    true
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Config with the optional fields at their defaults.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_enc_layers: usize,
        n_dec_layers: usize,
        encoder_window: usize,
        compression_rate: usize,
        decoder_budget: usize,
        max_segments: usize,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            n_enc_layers,
            n_dec_layers,
            encoder_window,
            compression_rate,
            decoder_budget,
            max_segments,
            positional: PositionalScheme::Rotary,
            include_embedding_level: true,
            mlp_ratio: default_mlp_ratio(),
            max_positions: None,
            rope_base: default_rope_base(),
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_dec_layers", self.n_dec_layers),
            ("encoder_window", self.encoder_window),
            ("compression_rate", self.compression_rate),
            ("decoder_budget", self.decoder_budget),
            ("max_segments", self.max_segments),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.n_levels() == 0 {
            return Err(Error::Config {
                field: "n_enc_layers",
                reason: "encoder exposes no levels".into(),
            });
        }
        if !self.encoder_window.is_multiple_of(self.compression_rate) {
            return Err(Error::Config {
                field: "compression_rate",
                reason: format!(
                    "encoder_window {} is not a multiple of {}",
                    self.encoder_window, self.compression_rate
                ),
            });
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config {
                field: "n_heads",
                reason: format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            });
        }
        if self.positional == PositionalScheme::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config {
                field: "n_heads",
                reason: "rotary encoding needs an even head dimension".into(),
            });
        }
        let needed = self.decoder_budget + self.max_segments * self.vectors_per_segment();
        if self.decoder_capacity() < needed {
            return Err(Error::Config {
                field: "max_positions",
                reason: format!("capacity {} is below the required {needed}", self.decoder_capacity()),
            });
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config {
                field: "ln_eps",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vectors_per_segment(&self) -> usize {
        self.encoder_window / self.compression_rate
    }

    /// Number of compressed levels the encoder exposes.
    pub fn n_levels(&self) -> usize {
        self.n_enc_layers + usize::from(self.include_embedding_level)
    }

    /// Decoder injection slots: the input concatenation plus one per block.
    pub fn n_slots(&self) -> usize {
        self.n_dec_layers + 1
    }

    pub fn decoder_capacity(&self) -> usize {
        self.max_positions
            .unwrap_or(self.decoder_budget + self.max_segments * self.vectors_per_segment())
    }

    /// Longest context the encoder accepts.
    pub fn max_context(&self) -> usize {
        self.max_segments * self.encoder_window
    }

    /// Compressed vectors produced for a context of `len` tokens.
    pub fn compressed_len(&self, len: usize) -> usize {
        compressed_len(len, self.encoder_window, self.compression_rate)
    }
}

/// `sum over segments of ceil(segment_len / r)` for segments of length `w`.
pub fn compressed_len(len: usize, w: usize, r: usize) -> usize {
    let full = len / w;
    let tail = len % w;
    full * (w / r) + tail.div_ceil(r)
}
