//! Command-line interface.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcc_core::data::{build_synthetic_corpus, gen_passkey_dataset, gen_qa_set, CorpusKind, Tokenizer};
use rcc_core::eval::{
    asymptotic_ratio, crossover, instruction_modes_eval, memory_report, passkey_eval, reconstruction_eval, BleuReport,
    ModelGenerator, ReconProtocol,
};
use rcc_core::model::{DecodeMode, ModelConfig};
use rcc_core::substrate::{Precision, Scalar};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::io::{
    json_field, read_corpus, read_passkeys, read_qa, write_corpus, write_csv, write_json, write_jsonl, CorpusMeta,
    StreamMode,
};
use crate::pipeline::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "rcc", version, about = "Train and evaluate context-compressing encoder-decoder models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic token corpus and its JSON sidecar.
    GenCorpus(GenCorpusArgs),
    /// Write a passkey retrieval dataset as JSON lines.
    GenPasskey(GenPasskeyArgs),
    /// Write a template-facts QA set as JSON lines.
    GenQa(GenQaArgs),
    /// Run the training stages of a run config.
    Train(TrainArgs),
    /// BLEU-4 of greedy reconstructions from compressed windows.
    EvalRecon(EvalReconArgs),
    /// Passkey retrieval accuracy.
    EvalPasskey(EvalPasskeyArgs),
    /// Token F1 of the three instruction modes on a QA set.
    EvalQa(EvalQaArgs),
    /// Analytic memory curves against a plain decoder.
    MemoryReport(MemoryReportArgs),
    /// Compare report fields against thresholds; exit 1 if any fails.
    Check(CheckArgs),
    /// Complete a prompt given a context.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    MarkovChars,
    RandomTokens,
    TemplateFacts,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub size: usize,
    #[arg(long, env = "RCC_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the markov transition table; separate from the stream seed
    /// so that train and test streams can share one chain.
    #[arg(long, default_value_t = 0)]
    pub chain_seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_successors: usize,
    #[arg(long, default_value_t = 5)]
    pub max_successors: usize,
    /// Vocabulary of random-tokens corpora.
    #[arg(long, default_value_t = 256)]
    pub vocab: u32,
    /// Re-encode text corpora with a char-vocab tokenizer over this alphabet.
    #[arg(long)]
    pub alphabet: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenPasskeyArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub target_len: usize,
    #[arg(long, env = "RCC_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Measure lengths with a char-vocab tokenizer over this alphabet.
    #[arg(long)]
    pub alphabet: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenQaArgs {
    #[arg(long)]
    pub count: usize,
    /// Facts per context.
    #[arg(long, default_value_t = 4)]
    pub facts: usize,
    #[arg(long, env = "RCC_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps; the run can be resumed later.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, env = "RCC_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalReconArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 2048)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub positions: usize,
    #[arg(long, default_value_t = 300)]
    pub step: usize,
    #[arg(long, default_value_t = 10)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 500)]
    pub target_len: usize,
    /// Picks the sample windows.
    #[arg(long, env = "RCC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output stem; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalPasskeyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalQaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder input limit; defaults to the model's maximum context.
    #[arg(long)]
    pub encoder_max: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MemoryReportArgs {
    /// Model config JSON; defaults to a 24+24 layer, 2048-wide model with
    /// 2048-token segments at rate 32.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub bytes: u64,
    /// Uncompressed decoder tokens held next to the compressed context.
    #[arg(long, default_value_t = 512)]
    pub tail: u64,
    #[arg(long, default_value_t = 1024)]
    pub from: u64,
    #[arg(long, default_value_t = 65536)]
    pub to: u64,
    #[arg(long, default_value_t = 1024)]
    pub step: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// `field OP value` with OP one of >=, <=, >, <, ==; fields are dotted
    /// paths into the JSON report.
    #[arg(long = "expect", required = true)]
    pub expect: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    pub context: String,
    /// Read the context from a file instead.
    #[arg(long, conflicts_with = "context")]
    pub context_file: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Keep generating past end-of-text.
    #[arg(long)]
    pub no_stop: bool,
}

/// Parses the command line and runs it. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&a).map(|_| 0),
        Command::GenPasskey(a) => gen_passkey(&a).map(|_| 0),
        Command::GenQa(a) => gen_qa(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::EvalRecon(a) => with_checkpoint(&a.checkpoint, Ev::Recon(&a)).map(|_| 0),
        Command::EvalPasskey(a) => with_checkpoint(&a.checkpoint, Ev::Passkey(&a)).map(|_| 0),
        Command::EvalQa(a) => with_checkpoint(&a.checkpoint, Ev::Qa(&a)).map(|_| 0),
        Command::MemoryReport(a) => cmd_memory(&a).map(|_| 0),
        Command::Check(a) => cmd_check(&a),
        Command::Generate(a) => with_checkpoint(&a.checkpoint, Ev::Generate(&a)).map(|_| 0),
    }
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::MarkovChars => CorpusKind::MarkovChars {
            chain_seed: a.chain_seed,
            min_successors: a.min_successors,
            max_successors: a.max_successors,
        },
        KindArg::RandomTokens => CorpusKind::RandomTokens { vocab: a.vocab },
        KindArg::TemplateFacts => CorpusKind::TemplateFacts,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut tokens = build_synthetic_corpus(&kind, a.size, &mut rng)?;
    let (mode, vocab) = match (&kind, &a.alphabet) {
        (CorpusKind::RandomTokens { vocab }, None) => (StreamMode::Ids, *vocab as usize),
        (CorpusKind::RandomTokens { .. }, Some(_)) => bail!("--alphabet applies to text corpora only"),
        (_, None) => (StreamMode::Byte, Tokenizer::byte().vocab_size()),
        (_, Some(alpha)) => {
            let tok = Tokenizer::char_vocab(alpha)?;
            let bytes = Tokenizer::byte().decode_bytes(&tokens);
            tokens = tok.encode(&String::from_utf8_lossy(&bytes));
            (StreamMode::CharVocab, tok.vocab_size())
        }
    };
    let meta = CorpusMeta {
        vocab,
        mode,
        alphabet: a.alphabet.clone(),
        size: tokens.len(),
        generator: kind,
        seed: a.seed,
    };
    write_corpus(&a.out, &tokens, &meta)
}

pub fn gen_passkey(a: &GenPasskeyArgs) -> Result<()> {
    let tok = crate::pipeline::tokenizer_for(a.alphabet.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rows = gen_passkey_dataset(a.count, a.target_len, &tok, &mut rng)?;
    write_jsonl(&a.out, &rows)
}

pub fn gen_qa(a: &GenQaArgs) -> Result<()> {
    ensure!(a.facts > 0, "--facts must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    write_jsonl(&a.out, &gen_qa_set(a.count, a.facts, &mut rng))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.output_dir {
        cfg.output_dir = d.clone();
    }
    let out = train(
        &cfg,
        &TrainOptions {
            resume: a.resume,
            max_steps: a.max_steps,
        },
    )?;
    for s in &out.summaries {
        println!(
            "stage {} ({:?}): {} steps, lr {:e}, final loss {:.4}, encoder unchanged {}",
            s.stage_index, s.stage, s.steps, s.learning_rate, s.final_loss, s.encoder_unchanged
        );
    }
    if !out.completed {
        println!("stopped early; continue with --resume");
    }
    Ok(())
}

enum Ev<'a> {
    Recon(&'a EvalReconArgs),
    Passkey(&'a EvalPasskeyArgs),
    Qa(&'a EvalQaArgs),
    Generate(&'a GenerateArgs),
}

fn with_checkpoint(path: &Path, ev: Ev<'_>) -> Result<()> {
    match checkpoint::precision_of(path)? {
        Precision::F32 => evaluate(&checkpoint::load::<f32>(path)?, ev),
        Precision::F64 => evaluate(&checkpoint::load::<f64>(path)?, ev),
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Random windows of `window` tokens from `corpus`.
pub fn recon_samples(corpus: &[u32], count: usize, window: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    ensure!(corpus.len() >= window, "corpus shorter than one window");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let s = rng.gen_range(0..=corpus.len() - window);
            corpus[s..s + window].to_vec()
        })
        .collect())
}

pub fn write_bleu_report(stem: &Path, report: &BleuReport) -> Result<()> {
    write_json(&with_ext(stem, "json"), report)?;
    let rows = report
        .per_prompt_scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                (i / report.n_positions).to_string(),
                (i % report.n_positions).to_string(),
                s.to_string(),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(&with_ext(stem, "csv"), &["sample", "position", "bleu4"], &rows)
}

fn evaluate<T: Scalar>(ck: &Checkpoint<T>, ev: Ev<'_>) -> Result<()> {
    let model = &ck.model;
    let tok = &ck.tokenizer;
    let mut gen = ModelGenerator::new(model);
    match ev {
        Ev::Recon(a) => {
            let (corpus, _) = read_corpus(&a.corpus)?;
            let samples = recon_samples(&corpus, a.samples, a.window, a.seed)?;
            let protocol = ReconProtocol {
                window: a.window,
                n_positions: a.positions,
                step: a.step,
                prompt_len: a.prompt_len,
                target_len: a.target_len,
            };
            let report = reconstruction_eval(&mut gen, &samples, &protocol)?;
            write_bleu_report(&a.out, &report)?;
            println!("bleu4 {:.4} over {} samples", report.mean, report.n_samples);
        }
        Ev::Passkey(a) => {
            let data = read_passkeys(&a.data)?;
            let report = passkey_eval(&mut gen, &data, tok)?;
            write_json(&with_ext(&a.out, "json"), &report)?;
            let rows = data
                .iter()
                .zip(&report.predictions)
                .enumerate()
                .map(|(i, (s, p))| {
                    vec![
                        i.to_string(),
                        s.key.to_string(),
                        p.map(|k| k.to_string()).unwrap_or_default(),
                        u8::from(*p == Some(s.key)).to_string(),
                    ]
                })
                .collect::<Vec<_>>();
            write_csv(&with_ext(&a.out, "csv"), &["sample", "key", "predicted", "correct"], &rows)?;
            println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.count);
        }
        Ev::Qa(a) => {
            let items = read_qa(&a.data)?;
            let enc_max = a.encoder_max.unwrap_or(model.config.max_context());
            let report = instruction_modes_eval(&mut gen, &items, tok, enc_max, model.config.decoder_budget)?;
            write_json(&with_ext(&a.out, "json"), &report)?;
            let f1 = rcc_core::eval::token_f1;
            let rows = items
                .iter()
                .zip(&report.outputs)
                .enumerate()
                .map(|(i, (it, o))| {
                    let recon = rcc_core::eval::split_reconstruction(&o.reconstruction).map_or(0.0, |(_, ans)| f1(ans, &it.answer));
                    vec![
                        i.to_string(),
                        f1(&o.human, &it.answer).to_string(),
                        recon.to_string(),
                        f1(&o.compress, &it.answer).to_string(),
                    ]
                })
                .collect::<Vec<_>>();
            write_csv(
                &with_ext(&a.out, "csv"),
                &["item", "ins_human", "ins_reconstruction", "ins_compress"],
                &rows,
            )?;
            println!(
                "human {:.4} reconstruction {:.4} compress {:.4} structural {:.3}",
                report.ins_human, report.ins_reconstruction, report.ins_compress, report.structural_rate
            );
        }
        Ev::Generate(a) => {
            let context = match &a.context_file {
                Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => a.context.clone(),
            };
            let state = model.compress_context(&tok.encode(&context))?;
            let prompt = tok.encode(&a.prompt);
            let stop = if a.no_stop { None } else { Some(tok.eot()) };
            let g = model.generate(&state, &prompt, a.max_new, stop, DecodeMode::Incremental)?;
            let mut out = g.continuation(prompt.len()).to_vec();
            if out.last() == Some(&tok.eot()) {
                out.pop();
            }
            println!("{}", tok.decode(&out));
            if g.truncated {
                eprintln!("stopped at the decoder capacity");
            }
        }
    }
    Ok(())
}

/// Model shape used by `memory-report` when no config is given.
pub fn large_reference_config() -> ModelConfig {
    ModelConfig::new(258, 2048, 16, 24, 24, 2048, 32, 2048, 1024)
}

#[derive(Serialize)]
struct MemorySummary {
    config: ModelConfig,
    bytes_per_elem: u64,
    decoder_tail: u64,
    crossover: Option<u64>,
    crossover_exact_params: Option<u64>,
    asymptotic_ratio: f64,
    points: Vec<rcc_core::eval::MemoryReport>,
}

fn cmd_memory(a: &MemoryReportArgs) -> Result<()> {
    let cfg = match &a.model {
        Some(p) => serde_json::from_slice::<ModelConfig>(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => large_reference_config(),
    };
    ensure!(a.step > 0 && a.from <= a.to, "--from, --to and --step describe an empty range");
    let points: Vec<_> = (a.from..=a.to)
        .step_by(a.step as usize)
        .map(|n| memory_report(&cfg, n, a.bytes, a.tail))
        .collect();
    let rows = points
        .iter()
        .map(|p| {
            [
                p.seq_len,
                p.baseline_bytes,
                p.rcc_bytes,
                p.breakdown.baseline_kv,
                p.breakdown.rcc_compressed_state,
                p.breakdown.rcc_encoder_transient,
                p.breakdown.rcc_decoder_kv,
                p.baseline_params_bytes,
                p.rcc_params_bytes,
            ]
            .iter()
            .map(u64::to_string)
            .collect()
        })
        .collect::<Vec<_>>();
    write_csv(
        &with_ext(&a.out, "csv"),
        &[
            "seq_len",
            "baseline_bytes",
            "rcc_bytes",
            "baseline_kv",
            "rcc_compressed_state",
            "rcc_encoder_transient",
            "rcc_decoder_kv",
            "baseline_params_bytes",
            "rcc_params_bytes",
        ],
        &rows,
    )?;
    let limit = 1 << 24;
    let summary = MemorySummary {
        crossover: crossover(&cfg, a.bytes, a.tail, false, limit),
        crossover_exact_params: crossover(&cfg, a.bytes, a.tail, true, limit),
        asymptotic_ratio: asymptotic_ratio(&cfg),
        config: cfg,
        bytes_per_elem: a.bytes,
        decoder_tail: a.tail,
        points,
    };
    write_json(&with_ext(&a.out, "json"), &summary)?;
    println!(
        "crossover {} tokens, asymptotic ratio {:.4}",
        summary.crossover.map_or("none".into(), |c| c.to_string()),
        summary.asymptotic_ratio
    );
    Ok(())
}

/// Parsed `field OP value` expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub field: String,
    pub op: &'static str,
    pub value: f64,
}

impl Expectation {
    pub fn parse(s: &str) -> Result<Self> {
        for op in [">=", "<=", "==", ">", "<"] {
            if let Some(i) = s.find(op) {
                let value = s[i + op.len()..].trim();
                return Ok(Self {
                    field: s[..i].trim().to_string(),
                    op,
                    value: value.parse().with_context(|| format!("`{value}` is not a number"))?,
                });
            }
        }
        bail!("expectation `{s}` has no comparison operator")
    }

    pub fn holds(&self, x: f64) -> bool {
        match self.op {
            ">=" => x >= self.value,
            "<=" => x <= self.value,
            "==" => x == self.value,
            ">" => x > self.value,
            _ => x < self.value,
        }
    }
}

fn cmd_check(a: &CheckArgs) -> Result<i32> {
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&a.report)?)
        .with_context(|| format!("parsing {}", a.report.display()))?;
    let mut failed = 0;
    for e in &a.expect {
        let exp = Expectation::parse(e)?;
        let got = json_field(&report, &exp.field)
            .with_context(|| format!("report has no field `{}`", exp.field))?;
        let x = match got {
            serde_json::Value::Bool(b) => f64::from(u8::from(*b)),
            v => v.as_f64().with_context(|| format!("field `{}` is not numeric", exp.field))?,
        };
        let ok = exp.holds(x);
        println!("{} {} = {x} (want {} {})", if ok { "PASS" } else { "FAIL" }, exp.field, exp.op, exp.value);
        failed += usize::from(!ok);
    }
    println!("{}", json!({ "checked": a.expect.len(), "failed": failed }));
    Ok(if failed == 0 { 0 } else { 1 })
}
