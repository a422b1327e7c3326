//! Graph-recorded forward passes: encoder segments, compression, and the
//! decoder with per-slot residual injection.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::config::{compressed_len, PositionalScheme};
use super::layer_map::LayerMap;
use super::weights::{BlockIds, RccModel};
use crate::error::{Error, Result};
use crate::substrate::kernels::causal_bias;
use crate::substrate::{lit, Graph, Scalar, Tensor, Var};

/// Per-level compressed vectors produced by the encoder over a whole context.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedState<T> {
    /// One `[n_compressed, d_model]` matrix per exposed encoder level.
    pub levels: Vec<Tensor<T>>,
    pub n_compressed: usize,
    pub source_length: usize,
}

impl<T: Scalar> CompressedState<T> {
    /// State for an empty context.
    pub fn empty(n_levels: usize, d_model: usize) -> Self {
        Self {
            levels: (0..n_levels).map(|_| Tensor::zeros(alloc::vec![0, d_model])).collect(),
            n_compressed: 0,
            source_length: 0,
        }
    }

    /// Concatenates two states level by level (`self` first).
    pub fn concat(&self, other: &Self) -> Self {
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| Tensor::concat_rows(&[a, b], a.cols()))
            .collect();
        Self {
            levels,
            n_compressed: self.n_compressed + other.n_compressed,
            source_length: self.source_length + other.source_length,
        }
    }
}

/// Compressed levels still attached to a graph.
#[derive(Debug, Clone)]
pub struct CompressedVars {
    pub levels: Vec<Var>,
    pub n_compressed: usize,
    pub source_length: usize,
}

impl CompressedVars {
    pub fn to_state<T: Scalar>(&self, g: &Graph<'_, T>) -> CompressedState<T> {
        CompressedState {
            levels: self.levels.iter().map(|v| g.value(*v).clone()).collect(),
            n_compressed: self.n_compressed,
            source_length: self.source_length,
        }
    }

    /// Registers a detached state as constant graph inputs.
    pub fn from_state<T: Scalar>(g: &mut Graph<'_, T>, state: &CompressedState<T>) -> Self {
        Self {
            levels: state.levels.iter().map(|t| g.input(t.clone())).collect(),
            n_compressed: state.n_compressed,
            source_length: state.source_length,
        }
    }
}

/// Memo of per-segment compressed rows. Segments compress independently,
/// so identical segments can be reused as long as encoder weights do not
/// change. Cleared when `capacity` entries are reached.
#[derive(Debug, Clone)]
pub struct SegmentCache<T> {
    entries: BTreeMap<Vec<u32>, CompressedState<T>>,
    capacity: usize,
    pub hits: u64,
    pub misses: u64,
}

impl<T: Scalar> SegmentCache<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            capacity,
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Splits `tokens` into consecutive segments of length `window`; the last
/// one may be shorter.
pub fn segment_sequence(tokens: &[u32], window: usize) -> Vec<&[u32]> {
    assert!(window > 0, "segment window must be positive");
    tokens.chunks(window).collect()
}

/// Row indices sampled from a segment of `len` tokens: `r-1, 2r-1, ...`, plus
/// the final row of a trailing partial block.
pub fn compressed_indices(len: usize, r: usize) -> Vec<usize> {
    assert!(r >= 1, "compression rate must be at least 1");
    let mut idx: Vec<usize> = (1..=len / r).map(|k| k * r - 1).collect();
    if !len.is_multiple_of(r) {
        idx.push(len - 1);
    }
    idx
}

pub(crate) fn block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &RccModel<T>,
    ids: &BlockIds,
    x: Var,
    positions: &[usize],
    bias: &Tensor<T>,
) -> Result<Var> {
    let cfg = &model.config;
    let eps = lit::<T>(cfg.ln_eps);
    let p = |g: &mut Graph<'_, T>, id| g.param(id);

    let (g1, b1) = (p(g, ids.ln1_gain), p(g, ids.ln1_bias));
    let h = g.layernorm(x, g1, b1, eps)?;
    let (wq, bq, wk, bk, wv, bv) = (
        p(g, ids.wq),
        p(g, ids.bq),
        p(g, ids.wk),
        p(g, ids.bk),
        p(g, ids.wv),
        p(g, ids.bv),
    );
    let mut q = g.linear(h, wq, Some(bq))?;
    let mut k = g.linear(h, wk, Some(bk))?;
    let v = g.linear(h, wv, Some(bv))?;
    if cfg.positional == PositionalScheme::Rotary {
        q = g.rotary(q, positions, cfg.n_heads, cfg.rope_base)?;
        k = g.rotary(k, positions, cfg.n_heads, cfg.rope_base)?;
    }
    let a = g.attention(q, k, v, bias, cfg.n_heads)?;
    let (wo, bo) = (p(g, ids.wo), p(g, ids.bo));
    let o = g.linear(a, wo, Some(bo))?;
    let x = g.add(x, o)?;

    let (g2, b2) = (p(g, ids.ln2_gain), p(g, ids.ln2_bias));
    let h = g.layernorm(x, g2, b2, eps)?;
    let (w1, bb1, w2, bb2) = (p(g, ids.w1), p(g, ids.b1), p(g, ids.w2), p(g, ids.b2));
    let f = g.linear(h, w1, Some(bb1))?;
    let f = g.gelu(f);
    let f = g.linear(f, w2, Some(bb2))?;
    g.add(x, f)
}

fn causal<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::matrix(len, len, causal_bias(len)).expect("square")
}

impl<T: Scalar> RccModel<T> {
    /// Hidden states of one segment at every exposed level, each
    /// `[len, d_model]`. Attention is causal within the segment.
    pub fn encode_segment_vars(&self, g: &mut Graph<'_, T>, segment: &[u32]) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if segment.len() > cfg.encoder_window {
            return Err(Error::SegmentTooLong {
                got: segment.len(),
                window: cfg.encoder_window,
            });
        }
        if segment.is_empty() {
            return Err(Error::Parameter("cannot encode an empty segment".into()));
        }
        let positions: Vec<usize> = (0..segment.len()).collect();
        let table = g.param(self.encoder.embed);
        let mut x = g.embedding(table, segment)?;
        if let Some(pos) = self.encoder.pos {
            let pt = g.param(pos);
            let pe = g.gather_rows(pt, &positions)?;
            x = g.add(x, pe)?;
        }
        let bias = causal::<T>(segment.len());
        let mut levels = Vec::with_capacity(cfg.n_enc_layers + 1);
        if cfg.include_embedding_level {
            levels.push(x);
        }
        for ids in &self.encoder.blocks {
            x = block_forward(g, self, ids, x, &positions, &bias)?;
            levels.push(x);
        }
        Ok(levels)
    }

    /// Detached per-level hidden states of one segment.
    pub fn encode_segment(&self, segment: &[u32]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(&self.params);
        let levels = self.encode_segment_vars(&mut g, segment)?;
        Ok(levels.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Segments, encodes, and stride-samples the whole context inside `g`.
    pub fn compress_vars(&self, g: &mut Graph<'_, T>, tokens: &[u32]) -> Result<CompressedVars> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_context() {
            return Err(Error::Capacity {
                got: tokens.len(),
                max: cfg.max_context(),
            });
        }
        let n_levels = cfg.n_levels();
        let mut per_level: Vec<Vec<Var>> = (0..n_levels).map(|_| Vec::new()).collect();
        for seg in segment_sequence(tokens, cfg.encoder_window) {
            let levels = self.encode_segment_vars(g, seg)?;
            let idx = compressed_indices(seg.len(), cfg.compression_rate);
            for (acc, lv) in per_level.iter_mut().zip(levels) {
                acc.push(g.gather_rows(lv, &idx)?);
            }
        }
        let levels = per_level
            .into_iter()
            .map(|parts| match parts.len() {
                0 => Ok(g.input(Tensor::zeros(alloc::vec![0, cfg.d_model]))),
                1 => Ok(parts[0]),
                _ => g.concat_rows(&parts),
            })
            .collect::<Result<Vec<_>>>()?;
        let n_compressed = compressed_len(tokens.len(), cfg.encoder_window, cfg.compression_rate);
        Ok(CompressedVars {
            levels,
            n_compressed,
            source_length: tokens.len(),
        })
    }

    /// Detached compressed state for `tokens`.
    pub fn compress_context(&self, tokens: &[u32]) -> Result<CompressedState<T>> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_context() {
            return Err(Error::Capacity {
                got: tokens.len(),
                max: cfg.max_context(),
            });
        }
        // One short-lived graph per segment keeps peak memory at one window.
        let mut state = CompressedState::empty(cfg.n_levels(), cfg.d_model);
        for seg in segment_sequence(tokens, cfg.encoder_window) {
            let mut g = Graph::new(&self.params);
            let part = self.compress_vars(&mut g, seg)?.to_state(&g);
            state = state.concat(&part);
        }
        Ok(state)
    }

    /// [`compress_context`](Self::compress_context) with segment reuse.
    pub fn compress_context_cached(&self, tokens: &[u32], cache: &mut SegmentCache<T>) -> Result<CompressedState<T>> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_context() {
            return Err(Error::Capacity {
                got: tokens.len(),
                max: cfg.max_context(),
            });
        }
        let mut state = CompressedState::empty(cfg.n_levels(), cfg.d_model);
        for seg in segment_sequence(tokens, cfg.encoder_window) {
            let part = match cache.entries.get(seg) {
                Some(p) => {
                    cache.hits += 1;
                    p.clone()
                }
                None => {
                    cache.misses += 1;
                    let mut g = Graph::new(&self.params);
                    let p = self.compress_vars(&mut g, seg)?.to_state(&g);
                    if cache.entries.len() >= cache.capacity {
                        cache.entries.clear();
                    }
                    cache.entries.insert(seg.to_vec(), p.clone());
                    p
                }
            };
            state = state.concat(&part);
        }
        Ok(state)
    }

    /// Logits `[len(tokens), vocab]` of the decoder reading `state` followed
    /// by `tokens` under a single causal mask.
    pub fn decoder_forward_vars(
        &self,
        g: &mut Graph<'_, T>,
        state: &CompressedVars,
        tokens: &[u32],
    ) -> Result<Var> {
        let cfg = &self.config;
        let n_c = state.n_compressed;
        let total = n_c + tokens.len();
        if total > cfg.decoder_capacity() {
            return Err(Error::DecoderCapacity {
                got: total,
                max: cfg.decoder_capacity(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::Parameter("decoder needs at least one token".into()));
        }
        let slots = if n_c > 0 {
            self.slot_inputs(g, &state.levels)?
        } else {
            Vec::new()
        };

        let positions: Vec<usize> = (0..total).collect();
        let table = g.param(self.decoder.embed);
        let tok = g.embedding(table, tokens)?;
        let mut x = if n_c > 0 {
            let p0 = self.project(g, 0, slots[0])?;
            g.concat_rows(&[p0, tok])?
        } else {
            tok
        };
        if let Some(pos) = self.decoder.pos {
            let pt = g.param(pos);
            let pe = g.gather_rows(pt, &positions)?;
            x = g.add(x, pe)?;
        }
        let bias = causal::<T>(total);
        for (i, ids) in self.decoder.blocks.iter().enumerate() {
            x = block_forward(g, self, ids, x, &positions, &bias)?;
            if n_c > 0 {
                let inj = self.project(g, i + 1, slots[i + 1])?;
                x = g.add_rows_at(x, inj, 0)?;
            }
        }
        let x = if n_c > 0 { g.slice_rows(x, n_c, tokens.len())? } else { x };
        let (lg, lb) = (g.param(self.decoder.ln_f_gain), g.param(self.decoder.ln_f_bias));
        let x = g.layernorm(x, lg, lb, lit(cfg.ln_eps))?;
        let (hw, hb) = (g.param(self.decoder.head_w), g.param(self.decoder.head_b));
        g.linear(x, hw, Some(hb))
    }

    /// Detached decoder logits.
    pub fn decoder_forward(&self, state: &CompressedState<T>, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let vars = CompressedVars::from_state(&mut g, state);
        let logits = self.decoder_forward_vars(&mut g, &vars, tokens)?;
        Ok(g.value(logits).clone())
    }

    /// Aligns encoder levels to decoder slots via [`LayerMap`].
    fn slot_inputs(&self, g: &mut Graph<'_, T>, levels: &[Var]) -> Result<Vec<Var>> {
        let map = LayerMap::build(levels.len(), self.config.n_slots());
        map.assignment
            .iter()
            .map(|group| {
                if group.len() == 1 {
                    return Ok(levels[group[0]]);
                }
                let mut acc = levels[group[0]];
                for &s in &group[1..] {
                    acc = g.add(acc, levels[s])?;
                }
                Ok(g.scale(acc, T::one() / T::from_usize(group.len()).unwrap()))
            })
            .collect()
    }

    fn project(&self, g: &mut Graph<'_, T>, slot: usize, x: Var) -> Result<Var> {
        let (w, b) = self.decoder.proj[slot];
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, Some(b))
    }
}
