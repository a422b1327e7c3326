//! Greedy decoding over a compressed context, with a KV-cached incremental
//! path and a full-recompute reference path.

use alloc::vec;
use alloc::vec::Vec;

use super::config::PositionalScheme;
use super::forward::CompressedState;
use super::layer_map::LayerMap;
use super::weights::{BlockIds, RccModel};
use crate::error::{Error, Result};
use crate::substrate::kernels::{self, MASKED};
use crate::substrate::{lit, Scalar, Tensor};

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax_lowest<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Key/value cache, one new position per step.
    Incremental,
    /// Re-run the whole decoder every step.
    FullRecompute,
}

/// Result of greedy generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated continuation.
    pub tokens: Vec<u32>,
    /// Generation stopped because the decoder ran out of positions.
    pub truncated: bool,
    /// Generation stopped on the end-of-text token (which is kept).
    pub stopped_on_eot: bool,
}

impl Generation {
    pub fn continuation(&self, prompt_len: usize) -> &[u32] {
        &self.tokens[prompt_len..]
    }
}

struct LayerCache<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Incremental decoder state: cached keys and values for every position
/// fed so far.
pub struct DecoderSession<'m, T: Scalar> {
    model: &'m RccModel<T>,
    cache: Vec<LayerCache<T>>,
    len: usize,
    n_compressed: usize,
}

impl<'m, T: Scalar> DecoderSession<'m, T> {
    /// Prefills the compressed positions of `state`.
    pub fn new(model: &'m RccModel<T>, state: &CompressedState<T>) -> Result<Self> {
        let cfg = &model.config;
        if state.n_compressed > cfg.decoder_capacity() {
            return Err(Error::DecoderCapacity {
                got: state.n_compressed,
                max: cfg.decoder_capacity(),
            });
        }
        let mut s = Self {
            model,
            cache: (0..cfg.n_dec_layers)
                .map(|_| LayerCache {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            len: 0,
            n_compressed: state.n_compressed,
        };
        if state.n_compressed > 0 {
            let slots = slot_values(model, state);
            let x0 = project(model, 0, &slots[0], state.n_compressed);
            s.run(x0, state.n_compressed, Some(&slots));
        }
        Ok(s)
    }

    /// Positions consumed so far, compressed ones included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_compressed(&self) -> usize {
        self.n_compressed
    }

    pub fn remaining(&self) -> usize {
        self.model.config.decoder_capacity() - self.len
    }

    /// Feeds tokens and returns their logits `[tokens.len(), vocab]`.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Tensor<T>> {
        let cfg = &self.model.config;
        if self.len + tokens.len() > cfg.decoder_capacity() {
            return Err(Error::DecoderCapacity {
                got: self.len + tokens.len(),
                max: cfg.decoder_capacity(),
            });
        }
        let d = cfg.d_model;
        let table = self.model.params.tensor(self.model.decoder.embed);
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::TokenRange {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            x.extend_from_slice(table.row(t as usize));
        }
        let h = self.run(x, tokens.len(), None);
        let m = self.model;
        let gain = m.params.tensor(m.decoder.ln_f_gain).data();
        let bias = m.params.tensor(m.decoder.ln_f_bias).data();
        let mut normed = vec![T::zero(); h.len()];
        kernels::layernorm_forward(&h, d, gain, bias, lit(cfg.ln_eps), &mut normed);
        let logits = kernels::linear(
            &normed,
            tokens.len(),
            m.params.tensor(m.decoder.head_w).data(),
            d,
            cfg.vocab_size,
            Some(m.params.tensor(m.decoder.head_b).data()),
        );
        Tensor::matrix(tokens.len(), cfg.vocab_size, logits)
    }

    /// Runs `n` new rows through every block, appending to the cache.
    /// `inject` carries the per-slot inputs when the rows are compressed
    /// positions.
    fn run(&mut self, mut x: Vec<T>, n: usize, inject: Option<&[Vec<T>]>) -> Vec<T> {
        let m = self.model;
        let cfg = &m.config;
        let d = cfg.d_model;
        let start = self.len;
        if let Some(pos) = m.decoder.pos {
            let table = m.params.tensor(pos);
            for (i, row) in x.chunks_exact_mut(d).enumerate() {
                for (a, b) in row.iter_mut().zip(table.row(start + i)) {
                    *a = *a + *b;
                }
            }
        }
        let positions: Vec<usize> = (start..start + n).collect();
        let total = start + n;
        let mut bias = vec![T::zero(); n * total];
        for i in 0..n {
            for j in start + i + 1..total {
                bias[i * total + j] = lit(MASKED);
            }
        }
        for (layer, ids) in m.decoder.blocks.iter().enumerate() {
            x = block_step(m, ids, &mut self.cache[layer], x, n, &positions, &bias, total);
            if let Some(slots) = inject {
                let y = project(m, layer + 1, &slots[layer + 1], n);
                for (a, b) in x.iter_mut().zip(&y) {
                    *a = *a + *b;
                }
            }
        }
        self.len = total;
        x
    }
}

fn p<T: Scalar>(m: &RccModel<T>, id: crate::substrate::ParamId) -> &[T] {
    m.params.tensor(id).data()
}

#[allow(clippy::too_many_arguments)]
fn block_step<T: Scalar>(
    m: &RccModel<T>,
    ids: &BlockIds,
    cache: &mut LayerCache<T>,
    x: Vec<T>,
    n: usize,
    positions: &[usize],
    bias: &[T],
    total: usize,
) -> Vec<T> {
    let cfg = &m.config;
    let d = cfg.d_model;
    let eps = lit::<T>(cfg.ln_eps);
    let mut h = vec![T::zero(); x.len()];
    kernels::layernorm_forward(&x, d, p(m, ids.ln1_gain), p(m, ids.ln1_bias), eps, &mut h);
    let mut q = kernels::linear(&h, n, p(m, ids.wq), d, d, Some(p(m, ids.bq)));
    let mut k = kernels::linear(&h, n, p(m, ids.wk), d, d, Some(p(m, ids.bk)));
    let v = kernels::linear(&h, n, p(m, ids.wv), d, d, Some(p(m, ids.bv)));
    if cfg.positional == PositionalScheme::Rotary {
        let (cos, sin) = kernels::rotary_tables::<T>(positions, cfg.head_dim(), cfg.rope_base);
        kernels::rotary_apply(&mut q, d, cfg.n_heads, &cos, &sin, false);
        kernels::rotary_apply(&mut k, d, cfg.n_heads, &cos, &sin, false);
    }
    cache.k.extend_from_slice(&k);
    cache.v.extend_from_slice(&v);
    let mut a = vec![T::zero(); n * d];
    kernels::attention_forward(&q, &cache.k, &cache.v, bias, n, total, d, cfg.n_heads, &mut a);
    let o = kernels::linear(&a, n, p(m, ids.wo), d, d, Some(p(m, ids.bo)));
    let mut x: Vec<T> = x.iter().zip(&o).map(|(a, b)| *a + *b).collect();
    kernels::layernorm_forward(&x, d, p(m, ids.ln2_gain), p(m, ids.ln2_bias), eps, &mut h);
    let hidden = d * cfg.mlp_ratio;
    let mut f = kernels::linear(&h, n, p(m, ids.w1), d, hidden, Some(p(m, ids.b1)));
    f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    let f = kernels::linear(&f, n, p(m, ids.w2), hidden, d, Some(p(m, ids.b2)));
    for (a, b) in x.iter_mut().zip(&f) {
        *a = *a + *b;
    }
    x
}

fn slot_values<T: Scalar>(m: &RccModel<T>, state: &CompressedState<T>) -> Vec<Vec<T>> {
    let map = LayerMap::build(state.levels.len(), m.config.n_slots());
    map.assignment
        .iter()
        .map(|group| {
            if group.len() == 1 {
                return state.levels[group[0]].data().to_vec();
            }
            let mut acc = state.levels[group[0]].data().to_vec();
            for &s in &group[1..] {
                for (a, b) in acc.iter_mut().zip(state.levels[s].data()) {
                    *a = *a + *b;
                }
            }
            let inv = T::one() / T::from_usize(group.len()).unwrap();
            acc.iter_mut().for_each(|v| *v = *v * inv);
            acc
        })
        .collect()
}

fn project<T: Scalar>(m: &RccModel<T>, slot: usize, x: &[T], n: usize) -> Vec<T> {
    let d = m.config.d_model;
    let (w, b) = m.decoder.proj[slot];
    kernels::linear(x, n, p(m, w), d, d, Some(p(m, b)))
}

impl<T: Scalar> RccModel<T> {
    /// Greedy continuation of `prompt` given a compressed context. Stops
    /// after `max_new` tokens, on `eot`, or when decoder positions run out
    /// (flagged as truncated).
    pub fn generate(
        &self,
        state: &CompressedState<T>,
        prompt: &[u32],
        max_new: usize,
        eot: Option<u32>,
        mode: DecodeMode,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Parameter("generation needs a non-empty prompt".into()));
        }
        let cap = self.config.decoder_capacity();
        if state.n_compressed + prompt.len() > cap {
            return Err(Error::DecoderCapacity {
                got: state.n_compressed + prompt.len(),
                max: cap,
            });
        }
        let mut tokens = prompt.to_vec();
        let mut out = Generation {
            tokens: Vec::new(),
            truncated: false,
            stopped_on_eot: false,
        };
        if max_new == 0 {
            out.tokens = tokens;
            return Ok(out);
        }
        let mut session = match mode {
            DecodeMode::Incremental => Some(DecoderSession::new(self, state)?),
            DecodeMode::FullRecompute => None,
        };
        let mut pending: Vec<u32> = prompt.to_vec();
        for step in 0..max_new {
            let next = match session.as_mut() {
                Some(s) => {
                    let logits = s.feed(&pending)?;
                    argmax_lowest(logits.row(logits.rows() - 1))
                }
                None => {
                    let logits = self.decoder_forward(state, &tokens)?;
                    argmax_lowest(logits.row(logits.rows() - 1))
                }
            };
            tokens.push(next);
            if Some(next) == eot {
                out.stopped_on_eot = true;
                break;
            }
            if step + 1 < max_new && state.n_compressed + tokens.len() >= cap {
                out.truncated = true;
                break;
            }
            pending.clear();
            pending.push(next);
        }
        out.tokens = tokens;
        Ok(out)
    }
}
