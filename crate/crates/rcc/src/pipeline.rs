//! Staged training runs with checkpoints, logs and resumption.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcc_core::data::{QaItem, Tokenizer};
use rcc_core::model::{RccModel, ENCODER_PREFIX};
use rcc_core::substrate::{Precision, Scalar};
use rcc_core::training::{
    encoder_fingerprint, make_direct_answer_example, make_human_instruction_example, make_instruction_example,
    make_passkey_example, run_stage, step_seed, Stage, TrainerState, TrainingData, TrainingExample,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Progress};
use crate::config::RunConfig;
use crate::io::{read_corpus, read_passkeys, read_qa, write_json};

/// Stage index used to derive seeds that belong to no stage.
const INIT_STREAM: u64 = u64::MAX;

pub fn tokenizer_for(alphabet: Option<&str>) -> Result<Tokenizer> {
    Ok(match alphabet {
        Some(a) => Tokenizer::char_vocab(a)?,
        None => Tokenizer::byte(),
    })
}

/// Seed of the random stream used to build the example pool of a stage.
pub fn pool_seed(seed: u64, stage_index: usize) -> u64 {
    step_seed(seed, stage_index as u64, u64::MAX)
}

/// Seed of the weight initialization.
pub fn init_seed(seed: u64) -> u64 {
    step_seed(seed, INIT_STREAM, 0)
}

/// Three examples per QA item: instruction reconstruction, direct answer
/// and plain-text instruction.
pub fn qa_pool(
    tok: &Tokenizer,
    items: &[QaItem],
    encoder_max: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingExample>> {
    let mut pool = Vec::with_capacity(items.len() * 3);
    for it in items {
        let (c, i, a) = (&it.context, &it.instruction, &it.answer);
        pool.push(make_instruction_example(tok, c, i, a, encoder_max, budget, rng)?);
        pool.push(make_direct_answer_example(tok, c, i, a, encoder_max, budget, rng)?);
        pool.push(make_human_instruction_example(tok, c, i, a, encoder_max, budget)?);
    }
    Ok(pool)
}

/// FNV-1a over the weights whose names do not start with the encoder prefix.
pub fn decoder_fingerprint<T: Scalar>(model: &RccModel<T>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut buf = Vec::new();
    for (_, p) in model.params.iter().filter(|(_, p)| !p.name.starts_with(ENCODER_PREFIX)) {
        buf.clear();
        for x in p.tensor.data() {
            x.append_le_bytes(&mut buf);
        }
        for b in &buf {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage_index: usize,
    pub stage: Stage,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Mean loss over the last (up to) 50 steps.
    pub final_loss: f64,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    pub encoder_unchanged: bool,
    pub decoder_changed: bool,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `latest.ckpt` in the output directory.
    pub resume: bool,
    /// Stop after this many optimizer steps in this invocation.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub summaries: Vec<StageSummary>,
    /// False when `max_steps` stopped the run early.
    pub completed: bool,
}

pub fn stage_log_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("stage{i}.log.jsonl"))
}

pub fn stage_checkpoint_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("stage{i}.ckpt"))
}

pub fn latest_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("latest.ckpt")
}

/// Runs every stage of `cfg`, writing logs, checkpoints and stage summaries
/// into its output directory.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, opts),
        Precision::F64 => train_as::<f64>(cfg, opts),
    }
}

fn keep_log_lines(path: &Path, n: usize) -> Result<()> {
    let kept: Vec<String> = match fs::File::open(path) {
        Ok(f) => BufReader::new(f).lines().take(n).collect::<std::io::Result<_>>()?,
        Err(_) => Vec::new(),
    };
    ensure!(kept.len() == n, "{} has {} lines, the checkpoint is at step {n}", path.display(), kept.len());
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn train_as<T: Scalar>(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    let tok = tokenizer_for(cfg.alphabet.as_deref())?;
    ensure!(
        tok.vocab_size() <= cfg.model.vocab_size,
        "model.vocab_size: {} is smaller than the tokenizer vocabulary ({})",
        cfg.model.vocab_size,
        tok.vocab_size()
    );

    let (mut model, mut first_stage, mut resumed) = if opts.resume {
        let path = latest_checkpoint_path(dir);
        let ck: Checkpoint<T> = checkpoint::load(&path)?;
        ensure!(ck.model.config == cfg.model, "model: config differs from the checkpoint being resumed");
        let (prog, state) = ck.trainer.context("latest.ckpt holds no trainer state")?;
        if prog.stage_done {
            (ck.model, prog.stage + 1, None)
        } else {
            (ck.model, prog.stage, Some(state))
        }
    } else if let Some(p) = &cfg.init_checkpoint {
        let ck: Checkpoint<T> = checkpoint::load(p)?;
        ensure!(ck.model.config == cfg.model, "init_checkpoint: model config differs from `model`");
        (ck.model, 0, None)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed));
        (RccModel::<T>::init(cfg.model.clone(), &mut rng)?, 0, None)
    };
    if first_stage > cfg.stages.len() {
        first_stage = cfg.stages.len();
    }

    let mut budget = opts.max_steps;
    let mut summaries = Vec::new();
    for i in first_stage..cfg.stages.len() {
        let plan = cfg.plan(i);
        let data_cfg = cfg.stage_data(i);
        let stream = match &data_cfg.corpus {
            Some(p) => {
                let (tokens, meta) = read_corpus(p)?;
                ensure!(
                    meta.vocab <= cfg.model.vocab_size,
                    "stages[{i}].data.corpus: vocabulary {} exceeds model.vocab_size",
                    meta.vocab
                );
                Some(tokens)
            }
            None => None,
        };
        let mut pool = Vec::new();
        if let Some(p) = &data_cfg.passkey {
            pool.extend(read_passkeys(p)?.iter().map(|s| make_passkey_example(&tok, s)));
        }
        if let Some(p) = &data_cfg.qa {
            let mut rng = ChaCha8Rng::seed_from_u64(pool_seed(cfg.seed, i));
            pool.extend(qa_pool(&tok, &read_qa(p)?, plan.encoder_length, cfg.model.decoder_budget, &mut rng)?);
        }
        let data = TrainingData {
            stream: stream.as_deref(),
            pool: if pool.is_empty() { None } else { Some(&pool) },
        };

        let log_path = stage_log_path(dir, i);
        let mut state = match resumed.take() {
            Some(s) => {
                keep_log_lines(&log_path, s.step)?;
                s
            }
            None => {
                fs::File::create(&log_path)?;
                TrainerState::new(&model)
            }
        };
        let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?);
        let enc_before = encoder_fingerprint(&model);
        let dec_before = decoder_fingerprint(&model);
        let mut losses = Vec::new();

        while state.step < plan.steps {
            let mut end = plan.steps;
            if let Some(k) = cfg.checkpoint_every {
                end = end.min((state.step / k + 1) * k);
            }
            if let Some(b) = budget {
                if b == 0 {
                    break;
                }
                end = end.min(state.step + b);
            }
            let start = state.step;
            let mut io_err = None;
            let records = run_stage(&plan, i as u64, &mut model, &data, &mut state, |rec| {
                if let Err(e) = serde_json::to_writer(&mut log, rec).map_err(anyhow::Error::from).and_then(|_| {
                    log.write_all(b"\n")?;
                    Ok(())
                }) {
                    io_err = Some(e);
                    return ControlFlow::Break(());
                }
                if rec.step + 1 >= end {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .with_context(|| format!("stage {i}"))?;
            if let Some(e) = io_err {
                return Err(e.context(format!("writing {}", log_path.display())));
            }
            log.flush()?;
            losses.extend(records.iter().map(|r| r.loss));
            if let Some(b) = budget.as_mut() {
                *b -= state.step - start;
            }
            let progress = Progress {
                stage: i,
                stage_done: state.step == plan.steps,
                step: state.step,
                cursor: state.cursor,
                adam_t: state.optimizer.t,
            };
            let ck = Checkpoint {
                model,
                tokenizer: tok.clone(),
                trainer: Some((progress, state)),
            };
            checkpoint::save(&latest_checkpoint_path(dir), &ck)?;
            let (p, s) = ck.trainer.expect("trainer state set");
            model = ck.model;
            state = s;
            if p.stage_done {
                break;
            }
        }
        if state.step < plan.steps {
            return Ok(TrainOutcome {
                summaries,
                completed: false,
            });
        }

        let enc_after = encoder_fingerprint(&model);
        if plan.stage == Stage::Stage2FrozenEncoder && enc_after != enc_before {
            bail!("stage {i}: encoder weights changed during a frozen stage");
        }
        let ck_path = stage_checkpoint_path(dir, i);
        fs::copy(latest_checkpoint_path(dir), &ck_path)?;
        let tail = &losses[losses.len().saturating_sub(50)..];
        let summary = StageSummary {
            stage_index: i,
            stage: plan.stage,
            steps: plan.steps,
            learning_rate: plan.learning_rate,
            seed: plan.seed,
            final_loss: if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 },
            encoder_hash_before: format!("{enc_before:016x}"),
            encoder_hash_after: format!("{enc_after:016x}"),
            encoder_unchanged: enc_after == enc_before,
            decoder_changed: decoder_fingerprint(&model) != dec_before,
            checkpoint: ck_path,
        };
        write_json(&dir.join(format!("stage{i}.summary.json")), &summary)?;
        summaries.push(summary);
    }
    Ok(TrainOutcome {
        summaries,
        completed: true,
    })
}
