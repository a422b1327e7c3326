use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::bleu::{bleu4, token_f1};
use crate::data::{extract_key, split_query, PasskeySample, QaItem, Tokenizer, QUESTION};
use crate::error::Result;
use crate::model::{CompressedState, DecodeMode, RccModel, SegmentCache};
use crate::substrate::Scalar;
use crate::training::{instruction_encoder_input, ASSISTANT_MARKER, RESPONSE_PREFIX, SYSTEM_PREFIX};

/// Anything that continues a prompt given a context to compress.
pub trait Generator {
    /// Continuation of `prompt` (prompt excluded), at most `max_new` tokens,
    /// ending early after `stop` (which is included).
    fn complete(&mut self, context: &[u32], prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<Vec<u32>>;
}

/// Greedy incremental decoding with a trained model. Consecutive calls with
/// the same context reuse its compressed state.
pub struct ModelGenerator<'m, T: Scalar> {
    model: &'m RccModel<T>,
    cache: SegmentCache<T>,
    last: Option<(Vec<u32>, CompressedState<T>)>,
    /// Generations cut short by decoder capacity.
    pub truncated: usize,
}

impl<'m, T: Scalar> ModelGenerator<'m, T> {
    pub fn new(model: &'m RccModel<T>) -> Self {
        Self {
            model,
            cache: SegmentCache::new(4096),
            last: None,
            truncated: 0,
        }
    }
}

impl<T: Scalar> Generator for ModelGenerator<'_, T> {
    fn complete(&mut self, context: &[u32], prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<Vec<u32>> {
        let fresh = !matches!(&self.last, Some((c, _)) if c == context);
        if fresh {
            let state = self.model.compress_context_cached(context, &mut self.cache)?;
            self.last = Some((context.to_vec(), state));
        }
        let state = &self.last.as_ref().expect("state set").1;
        let g = self.model.generate(state, prompt, max_new, stop, DecodeMode::Incremental)?;
        if g.truncated {
            self.truncated += 1;
        }
        Ok(g.tokens[prompt.len()..].to_vec())
    }
}

/// Prompt placement and lengths for reconstruction scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconProtocol {
    /// Context tokens compressed per sample.
    pub window: usize,
    pub n_positions: usize,
    /// Distance between prompt starts.
    pub step: usize,
    pub prompt_len: usize,
    pub target_len: usize,
}

impl ReconProtocol {
    /// 2048-token samples, five prompts of 10 tokens every 300 tokens,
    /// 500-token targets.
    pub fn full_scale() -> Self {
        Self {
            window: 2048,
            n_positions: 5,
            step: 300,
            prompt_len: 10,
            target_len: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Sample-major: `n_positions` consecutive scores per sample.
    pub per_prompt_scores: Vec<f64>,
    pub per_sample_means: Vec<f64>,
    pub mean: f64,
    pub n_samples: usize,
    pub n_positions: usize,
    /// Samples shorter than the window.
    pub skipped: usize,
}

/// BLEU-4 of greedy reconstructions at evenly spaced prompts, averaged per
/// sample and then over samples. References stop at the window end.
pub fn reconstruction_eval<G: Generator>(
    generator: &mut G,
    samples: &[Vec<u32>],
    protocol: &ReconProtocol,
) -> Result<BleuReport> {
    let mut per_prompt = Vec::new();
    let mut per_sample = Vec::new();
    let mut skipped = 0;
    for s in samples {
        if s.len() < protocol.window {
            skipped += 1;
            continue;
        }
        let ctx = &s[..protocol.window];
        let mut scores = Vec::with_capacity(protocol.n_positions);
        for k in 0..protocol.n_positions {
            let pos = k * protocol.step;
            let p_end = (pos + protocol.prompt_len).min(ctx.len());
            let r_end = (p_end + protocol.target_len).min(ctx.len());
            let reference = &ctx[p_end..r_end];
            let out = generator.complete(ctx, &ctx[pos..p_end], reference.len(), None)?;
            scores.push(bleu4(&out, reference));
        }
        per_sample.push(scores.iter().sum::<f64>() / scores.len().max(1) as f64);
        per_prompt.extend(scores);
    }
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(BleuReport {
        per_prompt_scores: per_prompt,
        n_samples: per_sample.len(),
        per_sample_means: per_sample,
        mean,
        n_positions: protocol.n_positions,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
    /// Key read from each generation, if any.
    pub predictions: Vec<Option<u32>>,
}

/// Tokens generated after the question.
pub const PASSKEY_MAX_NEW: usize = 8;

/// Compresses each haystack, asks the question and reads the first
/// 5-digit number of the reply.
pub fn passkey_eval<G: Generator>(generator: &mut G, dataset: &[PasskeySample], tok: &Tokenizer) -> Result<PasskeyReport> {
    let question = tok.encode(QUESTION);
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut correct = 0;
    for s in dataset {
        let ctx = tok.encode(split_query(&s.text).0);
        let out = generator.complete(&ctx, &question, PASSKEY_MAX_NEW, Some(tok.eot()))?;
        let key = extract_key(&tok.decode(&out));
        if key == Some(s.key) {
            correct += 1;
        }
        predictions.push(key);
    }
    Ok(PasskeyReport {
        accuracy: if dataset.is_empty() { 0.0 } else { correct as f64 / dataset.len() as f64 },
        correct,
        count: dataset.len(),
        predictions,
    })
}

/// Generated text of one QA item under each mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOutputs {
    pub human: String,
    pub reconstruction: String,
    pub compress: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModesReport {
    pub count: usize,
    pub ins_human: f64,
    pub ins_reconstruction: f64,
    pub ins_compress: f64,
    /// Fraction of reconstruction-mode outputs that repeat the instruction
    /// before the assistant marker.
    pub structural_rate: f64,
    pub outputs: Vec<ModeOutputs>,
}

/// Splits an instruction-reconstruction generation into the text before the
/// assistant marker and the answer after it.
pub fn split_reconstruction(output: &str) -> Option<(&str, &str)> {
    let marker = ASSISTANT_MARKER.trim();
    let i = output.find(marker)?;
    Some((&output[..i], &output[i + marker.len()..]))
}

/// Scores the three instruction modes with token F1.
///
/// * human: the context alone is compressed; the decoder reads the system
///   prefix, the instruction and the assistant marker.
/// * reconstruction: context and doubled instruction are compressed; the
///   decoder starts from the system prefix alone.
/// * compress: same compressed input; the decoder starts from the response
///   prefix.
pub fn instruction_modes_eval<G: Generator>(
    generator: &mut G,
    items: &[QaItem],
    tok: &Tokenizer,
    encoder_max: usize,
    decoder_budget: usize,
) -> Result<ModesReport> {
    let sep = u32::from(b' ');
    let eot = Some(tok.eot());
    let (mut h, mut r, mut c, mut structural) = (0.0, 0.0, 0.0, 0usize);
    let mut outputs = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let ctx = tok.encode(&item.context);
        let instr = tok.encode(&item.instruction);
        let compressed = instruction_encoder_input(&ctx, &instr, sep, i % 2 == 0, encoder_max)?;

        let mut prompt = tok.encode(SYSTEM_PREFIX);
        prompt.extend(&instr);
        prompt.extend(tok.encode(ASSISTANT_MARKER));
        let human_ctx = &ctx[..ctx.len().min(encoder_max)];
        let out = generator.complete(human_ctx, &prompt, decoder_budget.saturating_sub(prompt.len()), eot)?;
        let human = tok.decode(&out);
        h += token_f1(&human, &item.answer);

        let prompt = tok.encode(SYSTEM_PREFIX);
        let out = generator.complete(&compressed, &prompt, decoder_budget.saturating_sub(prompt.len()), eot)?;
        let recon = tok.decode(&out);
        match split_reconstruction(&recon) {
            Some((before, answer)) => {
                if before.contains(&item.instruction) {
                    structural += 1;
                }
                r += token_f1(answer, &item.answer);
            }
            None => r += 0.0,
        }

        let prompt = tok.encode(RESPONSE_PREFIX);
        let out = generator.complete(&compressed, &prompt, decoder_budget.saturating_sub(prompt.len()), eot)?;
        let compress = tok.decode(&out);
        c += token_f1(&compress, &item.answer);

        outputs.push(ModeOutputs {
            human,
            reconstruction: recon,
            compress,
        });
    }
    let n = items.len().max(1) as f64;
    Ok(ModesReport {
        count: items.len(),
        ins_human: h / n,
        ins_reconstruction: r / n,
        ins_compress: c / n,
        structural_rate: structural as f64 / n,
        outputs,
    })
}
