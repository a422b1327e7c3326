//! Run configuration: one JSON document per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rcc_core::eval::ReconProtocol;
use rcc_core::model::ModelConfig;
use rcc_core::substrate::Precision;
use rcc_core::training::{Stage, StagePlan};
use serde::{Deserialize, Serialize};

/// Inputs of a stage. Paths are relative to the working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Token stream for reconstruction and continuation examples.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Passkey samples (JSON lines) used as instruction-task examples.
    #[serde(default)]
    pub passkey: Option<PathBuf>,
    /// QA items (JSON lines) turned into instruction-task examples.
    #[serde(default)]
    pub qa: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub plan: StagePlan,
    /// Replaces the run-level data section for this stage.
    #[serde(default)]
    pub data: Option<DataConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub recon: Option<ReconProtocol>,
    #[serde(default)]
    pub recon_samples: Option<usize>,
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Alphabet of a char-vocab tokenizer; byte tokenizer when absent.
    #[serde(default)]
    pub alphabet: Option<String>,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    pub output_dir: PathBuf,
    /// Root of every random stream in the run. Stage seeds must be left
    /// unset or equal to it.
    #[serde(default)]
    pub seed: u64,
    /// Start from these weights instead of a fresh initialization.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Also save a resumable checkpoint every this many steps.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// Data section in force for stage `i`.
    pub fn stage_data(&self, i: usize) -> &DataConfig {
        self.stages[i].data.as_ref().unwrap_or(&self.data)
    }

    /// Checks every field that can be checked before training starts. Each
    /// error names the offending field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        if self.stages.is_empty() {
            bail!("stages: at least one stage is required");
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.plan.validate().with_context(|| format!("stages[{i}].plan"))?;
            if s.plan.seed != 0 && s.plan.seed != self.seed {
                bail!("stages[{i}].plan.seed: stage seeds derive from the run seed; set `seed` at the top level");
            }
            if s.plan.stage == Stage::Stage2FrozenEncoder && i == 0 && self.init_checkpoint.is_none() {
                bail!("stages[0].plan.stage: a frozen-encoder stage needs trained weights (add a full stage or init_checkpoint)");
            }
            let d = self.stage_data(i);
            for (field, p) in [("corpus", &d.corpus), ("passkey", &d.passkey), ("qa", &d.qa)] {
                if let Some(p) = p {
                    if !p.exists() {
                        bail!("stages[{i}].data.{field}: {} does not exist", p.display());
                    }
                }
            }
            let mix = s.plan.task_mix;
            if (mix.reconstruction > 0.0 || mix.continuation > 0.0) && d.corpus.is_none() {
                bail!("stages[{i}].data.corpus: reconstruction and continuation need a corpus");
            }
            if mix.instruction > 0.0 && d.passkey.is_none() && d.qa.is_none() {
                bail!("stages[{i}].data: instruction examples need a passkey or qa file");
            }
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.exists() {
                bail!("init_checkpoint: {} does not exist", p.display());
            }
        }
        if self.checkpoint_every == Some(0) {
            bail!("checkpoint_every: must be positive");
        }
        Ok(())
    }

    /// Plan of stage `i` with its seed set from the run seed.
    pub fn plan(&self, i: usize) -> StagePlan {
        let mut p = self.stages[i].plan.clone();
        p.seed = self.seed;
        p
    }
}
