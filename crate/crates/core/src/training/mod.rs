//! Training tasks, loss masking, the optimizer and the staged loop.

mod example;
mod loss;
mod optim;
mod plan;
mod trainer;


pub use example::{
    instruction_encoder_input, make_continuation_example, make_direct_answer_example, make_human_instruction_example, make_instruction_example,
    make_passkey_example, make_reconstruction_example, reconstruction_at, Task, TrainingExample, ASSISTANT_MARKER,
    CONTINUATION_LEAD_IN, PROMPT_LEN_MAX, PROMPT_LEN_MIN, RESPONSE_PREFIX, SYSTEM_PREFIX,
};
pub use loss::{masked_lm_loss, masked_lm_loss_var};
pub use optim::Adam;
pub use plan::{Stage, StagePlan, TaskMix};
pub use trainer::{encoder_fingerprint, run_stage, step_seed, LogRecord, TrainerState, TrainingData};
