//! BLEU and F1 scoring, evaluation harnesses, and the analytic memory model.

mod bleu;
mod harness;
mod memory;


pub use bleu::{bleu4, modified_precision, normalize_words, token_f1};
pub use harness::{
    instruction_modes_eval, passkey_eval, reconstruction_eval, split_reconstruction, BleuReport, Generator,
    ModeOutputs, ModelGenerator, ModesReport, PasskeyReport, ReconProtocol, PASSKEY_MAX_NEW,
};
pub use memory::{
    asymptotic_ratio, crossover, decoder_param_count, memory_report, model_param_count, MemoryBreakdown, MemoryReport,
};
