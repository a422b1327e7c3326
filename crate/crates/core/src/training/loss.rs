use crate::error::Result;
use crate::model::{CompressedState, CompressedVars, RccModel};
use crate::substrate::{scalar_value, Graph, Scalar, Var};

use super::example::TrainingExample;

/// Mean next-token negative log-likelihood over the masked-in decoder
/// tokens. With `frozen` the compressed state enters as a constant and the
/// encoder is not part of the graph.
pub fn masked_lm_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &RccModel<T>,
    example: &TrainingExample,
    frozen: Option<&CompressedState<T>>,
) -> Result<Var> {
    example.validate()?;
    let state = match frozen {
        Some(s) => CompressedVars::from_state(g, s),
        None => model.compress_vars(g, &example.encoder_tokens)?,
    };
    let n = example.decoder_tokens.len();
    let logits = model.decoder_forward_vars(g, &state, &example.decoder_tokens[..n - 1])?;
    g.softmax_cross_entropy(logits, &example.decoder_tokens[1..], &example.loss_mask[1..])
}

/// Detached loss value.
pub fn masked_lm_loss<T: Scalar>(model: &RccModel<T>, example: &TrainingExample) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let l = masked_lm_loss_var(&mut g, model, example, None)?;
    Ok(scalar_value(&g, l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::substrate::ParamGrads;
    use crate::training::Task;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> RccModel<f64> {
        let cfg = ModelConfig::new(32, 16, 2, 1, 1, 8, 4, 16, 2);
        RccModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn example(dec: Vec<u32>, mask: Vec<u8>) -> TrainingExample {
        TrainingExample {
            encoder_tokens: vec![1, 2, 3, 4, 5, 6],
            decoder_tokens: dec,
            loss_mask: mask,
            task: Task::Reconstruction,
        }
    }

    #[test]
    fn single_position_loss_is_its_log_probability() {
        let m = model(1);
        let ex = example(vec![7, 8, 9, 10], vec![0, 0, 1, 0]);
        let loss = masked_lm_loss(&m, &ex).unwrap();
        let state = m.compress_context(&ex.encoder_tokens).unwrap();
        let logits = m.decoder_forward(&state, &[7, 8, 9]).unwrap();
        let row = logits.row(1);
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        assert!((loss - (lse - row[9])).abs() < 1e-12);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let m = model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec: Vec<u32> = (0..16).map(|_| rng.gen_range(0..32)).collect();
        let loss = masked_lm_loss(&m, &example(dec, vec![1; 16])).unwrap();
        let ln_v = 32f64.ln();
        assert!((loss - ln_v).abs() / ln_v < 0.05, "{loss}");
    }

    #[test]
    fn masked_out_tails_get_no_embedding_gradient() {
        let m = model(3);
        // targets only token 1; tokens at 2..5 only feed later predictions
        let ex = example(vec![10, 11, 20, 21, 22, 23], vec![0, 1, 0, 0, 0, 0]);
        let mut grads = ParamGrads::zeros_like(&m.params);
        let mut g = Graph::new(&m.params);
        let l = masked_lm_loss_var(&mut g, &m, &ex, None).unwrap();
        g.backward(l, &mut grads).unwrap();
        let ge = grads.get(m.decoder.embed);
        let row = |t: usize| &ge[t * 16..(t + 1) * 16];
        assert!(row(10).iter().any(|&x| x != 0.0));
        for t in 20..=23 {
            assert!(row(t).iter().all(|&x| x == 0.0), "token {t}");
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = model(4);
        let ex = example(vec![1, 2, 3], vec![1, 0, 0]);
        assert_eq!(masked_lm_loss(&m, &ex).unwrap_err(), crate::Error::EmptyLoss);
    }
}
