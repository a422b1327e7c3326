use alloc::format;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::{make_continuation_example, make_reconstruction_example, Task, TrainingExample};
use super::loss::masked_lm_loss_var;
use super::optim::Adam;
use super::plan::{Stage, StagePlan};
use crate::error::{Error, Result};
use crate::model::{RccModel, SegmentCache};
use crate::substrate::{scalar_value, Graph, ParamGrads, Scalar};

/// Example sources for a stage: a token stream for reconstruction and
/// continuation, and a pool of prepared examples for the instruction task.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainingData<'a> {
    pub stream: Option<&'a [u32]>,
    pub pool: Option<&'a [TrainingExample]>,
}

impl<'a> TrainingData<'a> {
    pub fn stream(stream: &'a [u32]) -> Self {
        Self {
            stream: Some(stream),
            pool: None,
        }
    }

    pub fn pool(pool: &'a [TrainingExample]) -> Self {
        Self {
            stream: None,
            pool: Some(pool),
        }
    }

    /// Draws one example of `task`. Continuation examples read the stream
    /// sequentially from `cursor`, wrapping to the start when exhausted.
    pub fn draw<R: Rng>(
        &self,
        task: Task,
        encoder_length: usize,
        budget: usize,
        cursor: &mut usize,
        rng: &mut R,
    ) -> Result<TrainingExample> {
        let missing = |what: &str| Error::Parameter(format!("{what} needed for {task:?} examples"));
        match task {
            Task::Reconstruction => {
                let s = self.stream.ok_or_else(|| missing("a token stream"))?;
                if s.len() < encoder_length {
                    return Err(Error::Parameter("token stream shorter than the encoder length".into()));
                }
                let start = rng.gen_range(0..=s.len() - encoder_length);
                make_reconstruction_example(&s[start..start + encoder_length], budget, rng)
                    .ok_or_else(|| Error::Parameter("encoder length too short for reconstruction prompts".into()))
            }
            Task::Continuation => {
                let s = self.stream.ok_or_else(|| missing("a token stream"))?;
                let (ex, next) = match make_continuation_example(s, *cursor, encoder_length, budget) {
                    Some(v) => v,
                    None => make_continuation_example(s, 0, encoder_length, budget)
                        .ok_or_else(|| Error::Parameter("token stream too short for continuation".into()))?,
                };
                *cursor = next;
                Ok(ex)
            }
            Task::Instruction => {
                let pool = self.pool.filter(|p| !p.is_empty()).ok_or_else(|| missing("an example pool"))?;
                Ok(pool[rng.gen_range(0..pool.len())].clone())
            }
        }
    }
}

/// Resumable position inside a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Steps completed in the current stage.
    pub step: usize,
    pub optimizer: Adam,
    /// Continuation read position in the token stream.
    pub cursor: usize,
}

impl TrainerState {
    pub fn new<T: Scalar>(model: &RccModel<T>) -> Self {
        Self {
            step: 0,
            optimizer: Adam::new(&model.params),
            cursor: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the random stream used at `step` of stage `stage_index`.
pub fn step_seed(seed: u64, stage_index: u64, step: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stage_index) ^ step)
}

/// FNV-1a over the encoder weight bytes.
pub fn encoder_fingerprint<T: Scalar>(model: &RccModel<T>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut buf = Vec::new();
    for id in model.encoder_param_ids() {
        buf.clear();
        for x in model.params.tensor(id).data() {
            x.append_le_bytes(&mut buf);
        }
        for b in &buf {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Entries kept by the stage-2 segment cache before it is flushed.
const STAGE2_CACHE_ENTRIES: usize = 4096;

/// Runs `plan` from `state.step` to `plan.steps`, calling `on_step` after
/// every update; returning `Break` stops early with the state left
/// resumable. Stage 2 freezes the encoder and checks its weights are
/// untouched at the end.
pub fn run_stage<T: Scalar, F>(
    plan: &StagePlan,
    stage_index: u64,
    model: &mut RccModel<T>,
    data: &TrainingData<'_>,
    state: &mut TrainerState,
    mut on_step: F,
) -> Result<Vec<LogRecord>>
where
    F: FnMut(&LogRecord) -> ControlFlow<()>,
{
    plan.validate()?;
    let frozen = plan.stage == Stage::Stage2FrozenEncoder;
    model.set_encoder_trainable(!frozen);
    let before = encoder_fingerprint(model);
    let budget = model.config.decoder_budget;
    let mut cache = SegmentCache::new(if frozen { STAGE2_CACHE_ENTRIES } else { 0 });
    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut log = Vec::new();

    while state.step < plan.steps {
        let step = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(plan.seed, stage_index, step as u64));
        let task = plan.task_mix.pick(rng.gen());
        grads.clear();
        let mut total = 0.0;
        for _ in 0..plan.batch_size {
            let ex = data.draw(task, plan.encoder_length, budget, &mut state.cursor, &mut rng)?;
            let compressed = if frozen {
                Some(model.compress_context_cached(&ex.encoder_tokens, &mut cache)?)
            } else {
                None
            };
            let mut g = Graph::new(&model.params);
            let loss = masked_lm_loss_var(&mut g, model, &ex, compressed.as_ref())?;
            let value = scalar_value(&g, loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step}, example {:016x}",
                    ex.fingerprint()
                )));
            }
            total += value;
            g.backward(loss, &mut grads)?;
        }
        let inv = 1.0 / plan.batch_size as f64;
        grads.scale(T::from_f64_lossy(inv));
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        if let Some(clip) = plan.grad_clip {
            let norm = grads.global_norm().to_f64_lossy();
            if norm > clip {
                grads.scale(T::from_f64_lossy(clip / norm));
            }
        }
        let lr = plan.lr_at(step);
        state.optimizer.step(&mut model.params, &grads, lr);
        state.step += 1;
        let rec = LogRecord {
            step,
            task,
            loss: total * inv,
            lr,
            seed: plan.seed,
        };
        let flow = on_step(&rec);
        log.push(rec);
        if flow.is_break() {
            break;
        }
    }

    if frozen && encoder_fingerprint(model) != before {
        return Err(Error::Parameter("encoder weights changed during a frozen stage".into()));
    }
    Ok(log)
}
