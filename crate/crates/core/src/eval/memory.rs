use serde::{Deserialize, Serialize};

use crate::model::{compressed_len, ModelConfig};

/// Byte terms of the analytic memory model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub baseline_kv: u64,
    pub rcc_compressed_state: u64,
    pub rcc_encoder_transient: u64,
    pub rcc_decoder_kv: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub seq_len: u64,
    pub baseline_bytes: u64,
    pub rcc_bytes: u64,
    pub breakdown: MemoryBreakdown,
    /// Weights of a plain decoder of the same shape.
    pub baseline_params_bytes: u64,
    /// Encoder plus decoder weights, counted as twice the decoder.
    pub rcc_params_bytes: u64,
    /// Exact encoder, decoder and projection weights; informational, not
    /// part of `rcc_bytes`.
    pub rcc_params_bytes_exact: u64,
}

fn block_params(d: u64, mlp: u64) -> u64 {
    // attention 4 (d*d + d), MLP d*h + h + h*d + d, two norms 2 * 2d
    4 * (d * d + d) + (2 * d * mlp * d + mlp * d + d) + 4 * d
}

/// Parameter count of the decoder alone: embeddings, blocks, final norm
/// and output head.
pub fn decoder_param_count(cfg: &ModelConfig) -> u64 {
    let (d, v) = (cfg.d_model as u64, cfg.vocab_size as u64);
    v * d + cfg.n_dec_layers as u64 * block_params(d, cfg.mlp_ratio as u64) + 2 * d + d * v + v
}

/// Parameter count of the full model including the per-slot projections.
pub fn model_param_count(cfg: &ModelConfig) -> u64 {
    let (d, v) = (cfg.d_model as u64, cfg.vocab_size as u64);
    let encoder = v * d + cfg.n_enc_layers as u64 * block_params(d, cfg.mlp_ratio as u64);
    let proj = cfg.n_slots() as u64 * (d * d + d);
    encoder + decoder_param_count(cfg) + proj
}

/// Analytic memory of a plain decoder holding `seq_len` tokens of KV cache
/// against the compressed model holding the same context as compressed
/// vectors plus a `decoder_tail` of uncompressed tokens.
pub fn memory_report(cfg: &ModelConfig, seq_len: u64, bytes_per_elem: u64, decoder_tail: u64) -> MemoryReport {
    let d = cfg.d_model as u64;
    let b = bytes_per_elem;
    let n_c = compressed_len(seq_len as usize, cfg.encoder_window, cfg.compression_rate) as u64;
    let breakdown = MemoryBreakdown {
        baseline_kv: 2 * cfg.n_dec_layers as u64 * d * seq_len * b,
        rcc_compressed_state: cfg.n_levels() as u64 * n_c * d * b,
        rcc_encoder_transient: 2 * cfg.n_enc_layers as u64 * d * seq_len.min(cfg.encoder_window as u64) * b,
        rcc_decoder_kv: if seq_len == 0 {
            0
        } else {
            2 * cfg.n_dec_layers as u64 * d * (n_c + decoder_tail) * b
        },
    };
    let baseline_params_bytes = decoder_param_count(cfg) * b;
    let rcc_params_bytes = 2 * baseline_params_bytes;
    MemoryReport {
        seq_len,
        baseline_bytes: breakdown.baseline_kv + baseline_params_bytes,
        rcc_bytes: breakdown.rcc_compressed_state
            + breakdown.rcc_encoder_transient
            + breakdown.rcc_decoder_kv
            + rcc_params_bytes,
        breakdown,
        baseline_params_bytes,
        rcc_params_bytes,
        rcc_params_bytes_exact: model_param_count(cfg) * b,
    }
}

/// Smallest context length (searched up to `limit`) where the compressed
/// model needs fewer bytes than the baseline. `exact_params` swaps in the
/// exact parameter count.
pub fn crossover(cfg: &ModelConfig, bytes_per_elem: u64, decoder_tail: u64, exact_params: bool, limit: u64) -> Option<u64> {
    let total = |n| {
        let r = memory_report(cfg, n, bytes_per_elem, decoder_tail);
        let rcc = if exact_params {
            r.rcc_bytes - r.rcc_params_bytes + r.rcc_params_bytes_exact
        } else {
            r.rcc_bytes
        };
        (r.baseline_bytes, rcc)
    };
    (1..=limit).find(|&n| {
        let (base, rcc) = total(n);
        rcc < base
    })
}

/// Limiting `rcc_bytes / baseline_bytes` as the context grows.
pub fn asymptotic_ratio(cfg: &ModelConfig) -> f64 {
    let levels = cfg.n_levels() as f64;
    let layers = cfg.n_dec_layers as f64;
    let r = cfg.compression_rate as f64;
    (levels + 2.0 * layers) / (2.0 * layers * r)
}
