use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{answer_text, split_query, PasskeySample, Tokenizer, QUESTION};
use crate::error::{Error, Result};

pub const SYSTEM_PREFIX: &str = "system: You are a helpful assistant. user: ";
pub const ASSISTANT_MARKER: &str = " assistant: ";
pub const RESPONSE_PREFIX: &str = "Response of system:";

pub const PROMPT_LEN_MIN: usize = 5;
pub const PROMPT_LEN_MAX: usize = 20;
/// Masked lead-in at the start of a continuation target.
pub const CONTINUATION_LEAD_IN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruction,
    Continuation,
    Instruction,
}

/// Encoder context, decoder tokens and a per-token loss mask. `loss_mask[t]`
/// selects token `t` as a prediction target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub encoder_tokens: Vec<u32>,
    pub decoder_tokens: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub task: Task,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.loss_mask.len() != self.decoder_tokens.len() {
            return Err(Error::Parameter("loss mask and decoder tokens differ in length".into()));
        }
        // token 0 has no preceding decoder position to predict it from
        if self.loss_mask.iter().skip(1).all(|&m| m == 0) {
            return Err(Error::EmptyLoss);
        }
        Ok(())
    }

    /// FNV-1a over all three sequences; identifies an example in error
    /// reports.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |x: u32| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for &t in self.encoder_tokens.iter().chain(&self.decoder_tokens) {
            eat(t);
        }
        eat(u32::MAX);
        for &m in &self.loss_mask {
            eat(u32::from(m));
        }
        h
    }
}

/// Reconstruction example with an explicit prompt start and length. `None`
/// when the prompt leaves no continuation inside the window.
pub fn reconstruction_at(window: &[u32], start: usize, prompt_len: usize, budget: usize) -> Option<TrainingExample> {
    if prompt_len == 0 || start + prompt_len >= window.len() || prompt_len >= budget {
        return None;
    }
    let target_len = (window.len() - start - prompt_len).min(budget - prompt_len);
    let decoder_tokens = window[start..start + prompt_len + target_len].to_vec();
    let mut loss_mask = vec![0u8; prompt_len];
    loss_mask.resize(prompt_len + target_len, 1);
    Some(TrainingExample {
        encoder_tokens: window.to_vec(),
        decoder_tokens,
        loss_mask,
        task: Task::Reconstruction,
    })
}

/// Random prompt of 5 to 20 tokens from `window`; the decoder must continue
/// it from the compressed window. Short windows and budgets lower both
/// bounds. `None` when not even a one-token prompt fits.
pub fn make_reconstruction_example<R: Rng>(window: &[u32], budget: usize, rng: &mut R) -> Option<TrainingExample> {
    let hi = PROMPT_LEN_MAX.min(window.len().saturating_sub(2)).min(budget.saturating_sub(1));
    if hi == 0 {
        return None;
    }
    let prompt_len = rng.gen_range(PROMPT_LEN_MIN.min(hi)..=hi);
    let start = rng.gen_range(0..window.len() - prompt_len);
    reconstruction_at(window, start, prompt_len, budget)
}

/// Next `encoder_length` tokens go to the encoder and up to `budget`
/// following tokens to the decoder. Returns the example and the advanced
/// cursor, or `None` once the stream is exhausted.
pub fn make_continuation_example(
    stream: &[u32],
    cursor: usize,
    encoder_length: usize,
    budget: usize,
) -> Option<(TrainingExample, usize)> {
    let rest = stream.len().checked_sub(cursor)?;
    if rest < encoder_length + 2 || budget < 2 {
        return None;
    }
    let dec_len = (rest - encoder_length).min(budget);
    let enc_end = cursor + encoder_length;
    let lead = CONTINUATION_LEAD_IN.min(dec_len - 1);
    let mut loss_mask = vec![0u8; lead];
    loss_mask.resize(dec_len, 1);
    Some((
        TrainingExample {
            encoder_tokens: stream[cursor..enc_end].to_vec(),
            decoder_tokens: stream[enc_end..enc_end + dec_len].to_vec(),
            loss_mask,
            task: Task::Continuation,
        },
        enc_end + dec_len,
    ))
}

/// Encoder input with the instruction written twice, before or after the
/// context, truncating the context to `encoder_max` tokens overall.
pub fn instruction_encoder_input(
    context: &[u32],
    instruction: &[u32],
    separator: u32,
    at_start: bool,
    encoder_max: usize,
) -> Result<Vec<u32>> {
    let fixed = 2 * instruction.len() + 1 + usize::from(!context.is_empty());
    if fixed > encoder_max {
        return Err(Error::Parameter("instruction does not fit the encoder input".into()));
    }
    let keep = context.len().min(encoder_max - fixed);
    let mut out = Vec::with_capacity(fixed + keep);
    let twice = |out: &mut Vec<u32>| {
        out.extend_from_slice(instruction);
        out.push(separator);
        out.extend_from_slice(instruction);
    };
    if at_start {
        twice(&mut out);
        if !context.is_empty() {
            out.push(separator);
            out.extend_from_slice(&context[..keep]);
        }
    } else {
        if !context.is_empty() {
            out.extend_from_slice(&context[context.len() - keep..]);
            out.push(separator);
        }
        twice(&mut out);
    }
    Ok(out)
}

/// Instruction-reconstruction example: the decoder sees the fixed system
/// prefix and must regenerate the instruction, then the answer and `eot`.
pub fn make_instruction_example<R: Rng>(
    tok: &Tokenizer,
    context: &str,
    instruction: &str,
    answer: &str,
    encoder_max: usize,
    budget: usize,
    rng: &mut R,
) -> Result<TrainingExample> {
    let at_start = rng.gen_bool(0.5);
    let instr = tok.encode(instruction);
    let encoder_tokens = instruction_encoder_input(
        &tok.encode(context),
        &instr,
        u32::from(b' '),
        at_start,
        encoder_max,
    )?;
    let prefix = tok.encode(SYSTEM_PREFIX);
    let mut decoder_tokens = prefix.clone();
    decoder_tokens.extend(&instr);
    decoder_tokens.extend(tok.encode(ASSISTANT_MARKER));
    decoder_tokens.extend(tok.encode(answer));
    decoder_tokens.push(tok.eot());
    if decoder_tokens.len() > budget {
        return Err(Error::Parameter("instruction and answer exceed the decoder budget".into()));
    }
    let mut loss_mask = vec![0u8; prefix.len()];
    loss_mask.resize(decoder_tokens.len(), 1);
    Ok(TrainingExample {
        encoder_tokens,
        decoder_tokens,
        loss_mask,
        task: Task::Instruction,
    })
}

/// Direct-answer variant: the instruction lives only in the compressed
/// input and the decoder starts from the response prefix.
pub fn make_direct_answer_example<R: Rng>(
    tok: &Tokenizer,
    context: &str,
    instruction: &str,
    answer: &str,
    encoder_max: usize,
    budget: usize,
    rng: &mut R,
) -> Result<TrainingExample> {
    let at_start = rng.gen_bool(0.5);
    let encoder_tokens = instruction_encoder_input(
        &tok.encode(context),
        &tok.encode(instruction),
        u32::from(b' '),
        at_start,
        encoder_max,
    )?;
    let prefix = tok.encode(RESPONSE_PREFIX);
    let mut decoder_tokens = prefix.clone();
    decoder_tokens.extend(tok.encode(" "));
    decoder_tokens.extend(tok.encode(answer));
    decoder_tokens.push(tok.eot());
    if decoder_tokens.len() > budget {
        return Err(Error::Parameter("answer exceeds the decoder budget".into()));
    }
    let mut loss_mask = vec![0u8; prefix.len()];
    loss_mask.resize(decoder_tokens.len(), 1);
    Ok(TrainingExample {
        encoder_tokens,
        decoder_tokens,
        loss_mask,
        task: Task::Instruction,
    })
}

/// Example with the instruction given to the decoder as plain text and only
/// the context compressed; the loss covers the answer and `eot`.
pub fn make_human_instruction_example(
    tok: &Tokenizer,
    context: &str,
    instruction: &str,
    answer: &str,
    encoder_max: usize,
    budget: usize,
) -> Result<TrainingExample> {
    let mut encoder_tokens = tok.encode(context);
    encoder_tokens.truncate(encoder_max);
    let mut decoder_tokens = tok.encode(SYSTEM_PREFIX);
    decoder_tokens.extend(tok.encode(instruction));
    decoder_tokens.extend(tok.encode(ASSISTANT_MARKER));
    let given = decoder_tokens.len();
    decoder_tokens.extend(tok.encode(answer));
    decoder_tokens.push(tok.eot());
    if decoder_tokens.len() > budget {
        return Err(Error::Parameter("instruction and answer exceed the decoder budget".into()));
    }
    let mut loss_mask = vec![0u8; given];
    loss_mask.resize(decoder_tokens.len(), 1);
    Ok(TrainingExample {
        encoder_tokens,
        decoder_tokens,
        loss_mask,
        task: Task::Instruction,
    })
}

/// Passkey retrieval example: the haystack is compressed, the decoder reads
/// the question and is trained on the key continuation.
pub fn make_passkey_example(tok: &Tokenizer, sample: &PasskeySample) -> TrainingExample {
    let (haystack, _) = split_query(&sample.text);
    let mut decoder_tokens = tok.encode(QUESTION);
    let q = decoder_tokens.len();
    decoder_tokens.extend(tok.encode(&answer_text(sample.key)));
    decoder_tokens.push(tok.eot());
    let mut loss_mask = vec![0u8; q];
    loss_mask.resize(decoder_tokens.len(), 1);
    TrainingExample {
        encoder_tokens: tok.encode(haystack),
        decoder_tokens,
        loss_mask,
        task: Task::Instruction,
    }
}
