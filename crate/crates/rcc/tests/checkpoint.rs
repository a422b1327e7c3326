use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcc::checkpoint::{self, Checkpoint, Progress};
use rcc_core::data::{build_synthetic_corpus, CorpusKind, Tokenizer};
use rcc_core::model::{ModelConfig, RccModel};
use rcc_core::training::{run_stage, Stage, StagePlan, TaskMix, TrainerState, TrainingData};

fn tiny() -> ModelConfig {
    ModelConfig::new(258, 16, 2, 1, 2, 16, 4, 24, 2)
}

#[test]
fn weights_and_trainer_state_round_trip_bit_exact() {
    let mut model = RccModel::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let stream = build_synthetic_corpus(&CorpusKind::markov(1), 2000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let plan = StagePlan::new(Stage::Stage2FrozenEncoder, 16, 3, TaskMix::new(9.0, 1.0), 0);
    let mut st = TrainerState::new(&model);
    run_stage(&plan, 1, &mut model, &TrainingData::stream(&stream), &mut st, |_| ControlFlow::Continue(())).unwrap();
    let prog = Progress {
        stage: 1,
        stage_done: false,
        step: st.step,
        cursor: st.cursor,
        adam_t: st.optimizer.t,
    };
    let ck = Checkpoint {
        model,
        tokenizer: Tokenizer::byte(),
        trainer: Some((prog.clone(), st.clone())),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &ck).unwrap();
    let back: Checkpoint<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(back.model.params, ck.model.params);
    assert_eq!(back.model.config, ck.model.config);
    assert!(back.model.encoder_frozen());
    assert_eq!(back.tokenizer, ck.tokenizer);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
    let (p2, s2) = back.trainer.unwrap();
    assert_eq!(p2, prog);
    assert_eq!(s2, st);
}

#[test]
fn precision_mismatch_and_corruption_are_reported() {
    let model = RccModel::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let ck = Checkpoint {
        model,
        tokenizer: Tokenizer::char_vocab("ab ").unwrap(),
        trainer: None,
    };
    let bytes = checkpoint::to_bytes(&ck).unwrap();
    assert!(checkpoint::from_bytes::<f32>(&bytes).is_err());
    let back = checkpoint::from_bytes::<f64>(&bytes).unwrap();
    assert_eq!(back.tokenizer.encode("ba"), vec![1, 0]);
    assert!(checkpoint::from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
    assert!(checkpoint::from_bytes::<f64>(b"not a checkpoint").is_err());
}
