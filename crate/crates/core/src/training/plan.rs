use serde::{Deserialize, Serialize};

use super::example::Task;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Every parameter trains.
    Stage1Full,
    /// Encoder weights stay fixed; compressed states carry no gradient.
    Stage2FrozenEncoder,
}

/// Relative task frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub reconstruction: f64,
    pub continuation: f64,
    #[serde(default)]
    pub instruction: f64,
}

impl TaskMix {
    pub fn new(reconstruction: f64, continuation: f64) -> Self {
        Self {
            reconstruction,
            continuation,
            instruction: 0.0,
        }
    }

    pub fn only(task: Task) -> Self {
        let mut m = Self::new(0.0, 0.0);
        match task {
            Task::Reconstruction => m.reconstruction = 1.0,
            Task::Continuation => m.continuation = 1.0,
            Task::Instruction => m.instruction = 1.0,
        }
        m
    }

    fn weights(&self) -> [(Task, f64); 3] {
        [
            (Task::Reconstruction, self.reconstruction),
            (Task::Continuation, self.continuation),
            (Task::Instruction, self.instruction),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|(_, x)| !x.is_finite() || *x < 0.0) || w.iter().all(|(_, x)| *x == 0.0) {
            return Err(Error::Config {
                field: "task_mix",
                reason: "weights must be non-negative with a positive total".into(),
            });
        }
        Ok(())
    }

    /// Maps a uniform draw `u` in `[0, 1)` to a task.
    pub fn pick(&self, u: f64) -> Task {
        let w = self.weights();
        let total: f64 = w.iter().map(|x| x.1).sum();
        let mut acc = 0.0;
        for (task, x) in w {
            acc += x / total;
            if u < acc && x > 0.0 {
                return task;
            }
        }
        w.iter().rev().find(|x| x.1 > 0.0).expect("positive weight").0
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    1
}

/// One training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    /// Encoder context length of the examples drawn from a token stream.
    pub encoder_length: usize,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub task_mix: TaskMix,
    #[serde(default)]
    pub seed: u64,
    /// Linear warm-up from zero over this many steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl StagePlan {
    pub fn new(stage: Stage, encoder_length: usize, steps: usize, task_mix: TaskMix, seed: u64) -> Self {
        Self {
            stage,
            encoder_length,
            steps,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            task_mix,
            seed,
            warmup_steps: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                field: "learning_rate",
                reason: "must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size",
                reason: "must be positive".into(),
            });
        }
        if self.encoder_length == 0 {
            return Err(Error::Config {
                field: "encoder_length",
                reason: "must be positive".into(),
            });
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config {
                    field: "grad_clip",
                    reason: "must be positive".into(),
                });
            }
        }
        self.task_mix.validate()
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}
