use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::substrate::{Graph, Tensor, Var};

fn tiny(enc: usize, dec: usize, window: usize, r: usize) -> ModelConfig {
    ModelConfig::new(32, 8, 2, enc, dec, window, r, 12, 3)
}

/// Model with every parameter (gains and biases included) drawn uniformly
/// from [-0.5, 0.5] so no term of the forward pass is trivially zero.
fn random_model(cfg: ModelConfig, seed: u64) -> RccModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = RccModel::<f64>::zeros(cfg).unwrap();
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).tensor.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    m
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

// ---- naive oracle -------------------------------------------------------

fn w(m: &RccModel<f64>, id: crate::substrate::ParamId) -> &[f64] {
    m.params.tensor(id).data()
}

fn o_linear(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let d_out = b.len();
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * d_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn o_layernorm(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

fn o_rotary(x: &mut [Vec<f64>], heads: usize) {
    let d = x[0].len();
    let dh = d / heads;
    let half = dh / 2;
    for (p, row) in x.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..half {
                let theta = p as f64 / 10_000f64.powf(i as f64 / half as f64);
                let (a, b) = (row[h * dh + i], row[h * dh + i + half]);
                row[h * dh + i] = a * theta.cos() - b * theta.sin();
                row[h * dh + i + half] = a * theta.sin() + b * theta.cos();
            }
        }
    }
}

fn o_block(m: &RccModel<f64>, ids: &BlockIds, x: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let h = o_layernorm(x, w(m, ids.ln1_gain), w(m, ids.ln1_bias));
    let mut q = o_linear(&h, w(m, ids.wq), w(m, ids.bq));
    let mut k = o_linear(&h, w(m, ids.wk), w(m, ids.bk));
    let v = o_linear(&h, w(m, ids.wv), w(m, ids.bv));
    o_rotary(&mut q, heads);
    o_rotary(&mut k, heads);
    let mut a = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                a[i][c] = (0..=i).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let o = o_linear(&a, w(m, ids.wo), w(m, ids.bo));
    let x1: Vec<Vec<f64>> = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let h = o_layernorm(&x1, w(m, ids.ln2_gain), w(m, ids.ln2_bias));
    let f = o_linear(&h, w(m, ids.w1), w(m, ids.b1));
    let f: Vec<Vec<f64>> = f
        .iter()
        .map(|r| {
            r.iter()
                .map(|&u| 0.5 * u * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (u + 0.044715 * u * u * u)).tanh()))
                .collect()
        })
        .collect();
    let f = o_linear(&f, w(m, ids.w2), w(m, ids.b2));
    x1.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

#[test]
fn one_layer_encoder_matches_hand_unrolled_oracle() {
    let m = random_model(tiny(1, 1, 4, 2), 11);
    let seg = [3u32, 17, 0, 31];
    let levels = m.encode_segment(&seg).unwrap();
    assert_eq!(levels.len(), 2);
    let table = m.params.tensor(m.encoder.embed);
    let x: Vec<Vec<f64>> = seg.iter().map(|&t| table.row(t as usize).to_vec()).collect();
    let expect = o_block(&m, &m.encoder.blocks[0], &x, 2);
    for (i, row) in expect.iter().enumerate() {
        assert_eq!(levels[0].row(i), &x[i][..]);
        for (a, b) in levels[1].row(i).iter().zip(row) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn decoder_matches_oracle_with_injection() {
    // 1 encoder block, 1 decoder block: levels [embed, block0] map onto
    // slots [input, after block 0].
    let m = random_model(tiny(1, 1, 4, 2), 12);
    let ctx = [5u32, 6, 7, 8, 9, 10];
    let toks = [1u32, 2, 3];
    let state = m.compress_context(&ctx).unwrap();
    assert_eq!(state.n_compressed, 3);
    let logits = m.decoder_forward(&state, &toks).unwrap();

    let proj = |slot: usize, level: &Tensor<f64>| {
        let rows: Vec<Vec<f64>> = (0..level.rows()).map(|i| level.row(i).to_vec()).collect();
        let (pw, pb) = m.decoder.proj[slot];
        o_linear(&rows, w(&m, pw), w(&m, pb))
    };
    let table = m.params.tensor(m.decoder.embed);
    let mut x = proj(0, &state.levels[0]);
    x.extend(toks.iter().map(|&t| table.row(t as usize).to_vec()));
    let mut x = o_block(&m, &m.decoder.blocks[0], &x, 2);
    for (row, add) in x.iter_mut().zip(proj(1, &state.levels[1])) {
        row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
    }
    let x = o_layernorm(&x[3..], w(&m, m.decoder.ln_f_gain), w(&m, m.decoder.ln_f_bias));
    let expect = o_linear(&x, w(&m, m.decoder.head_w), w(&m, m.decoder.head_b));
    assert_eq!(logits.shape(), &[3, 32]);
    for (i, row) in expect.iter().enumerate() {
        for (a, b) in logits.row(i).iter().zip(row) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn segments_encode_independently_of_order() {
    let m = random_model(tiny(2, 2, 8, 4), 3);
    let a = [1u32, 2, 3, 4, 5, 6, 7, 8];
    let b = [9u32, 9, 8, 8, 7, 7, 6];
    let a1 = m.encode_segment(&a).unwrap();
    let b1 = m.encode_segment(&b).unwrap();
    let b2 = m.encode_segment(&b).unwrap();
    let a2 = m.encode_segment(&a).unwrap();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(a1.len(), 3);
    assert!(a1.iter().all(|l| l.shape() == [8, 8]));
    assert!(b1.iter().all(|l| l.shape() == [7, 8]));
}

#[test]
fn over_length_inputs_are_rejected() {
    let m = random_model(tiny(1, 1, 8, 4), 1);
    assert_eq!(
        m.encode_segment(&[0; 9]).unwrap_err(),
        crate::Error::SegmentTooLong { got: 9, window: 8 }
    );
    assert_eq!(
        m.compress_context(&[0; 25]).unwrap_err(),
        crate::Error::Capacity { got: 25, max: 24 }
    );
    let state = m.compress_context(&[0; 24]).unwrap();
    assert_eq!(state.n_compressed, 6);
    // capacity = 12 + 3 * 2 = 18
    assert!(m.decoder_forward(&state, &[0; 12]).is_ok());
    assert_eq!(
        m.decoder_forward(&state, &[0; 13]).unwrap_err(),
        crate::Error::DecoderCapacity { got: 19, max: 18 }
    );
}

#[test]
fn joint_compression_equals_concatenated_segments() {
    let m = random_model(tiny(2, 3, 8, 4), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let toks = random_tokens(&mut rng, 21, 32);
    let joint = m.compress_context(&toks).unwrap();
    let split = m
        .compress_context(&toks[..8])
        .unwrap()
        .concat(&m.compress_context(&toks[8..16]).unwrap())
        .concat(&m.compress_context(&toks[16..]).unwrap());
    assert_eq!(joint, split);
    assert_eq!(joint.n_compressed, 2 + 2 + 2);

    // A single graph over the whole context agrees bit for bit as well.
    let mut g = Graph::new(&m.params);
    let vars = m.compress_vars(&mut g, &toks).unwrap();
    assert_eq!(vars.to_state(&g), joint);
}

#[test]
fn large_config_segment_counts() {
    let cfg = ModelConfig::new(258, 16, 2, 1, 1, 2048, 32, 16, 2);
    assert_eq!(cfg.compressed_len(4096), 128);
    assert_eq!(cfg.compressed_len(2048 + 904), 64 + 29);
}

/// Plain causal language model over the decoder weights, with no compressed
/// rows anywhere.
fn plain_causal_lm(m: &RccModel<f64>, tokens: &[u32]) -> Tensor<f64> {
    let cfg = &m.config;
    let mut g = Graph::new(&m.params);
    let table = g.param(m.decoder.embed);
    let mut x: Var = g.embedding(table, tokens).unwrap();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let bias = Tensor::matrix(tokens.len(), tokens.len(), crate::substrate::kernels::causal_bias(tokens.len())).unwrap();
    for ids in &m.decoder.blocks {
        x = super::forward::block_forward(&mut g, m, ids, x, &positions, &bias).unwrap();
    }
    let (lg, lb) = (g.param(m.decoder.ln_f_gain), g.param(m.decoder.ln_f_bias));
    let x = g.layernorm(x, lg, lb, cfg.ln_eps).unwrap();
    let (hw, hb) = (g.param(m.decoder.head_w), g.param(m.decoder.head_b));
    let y = g.linear(x, hw, Some(hb)).unwrap();
    g.value(y).clone()
}

#[test]
fn empty_context_reduces_to_plain_decoder() {
    let m = random_model(tiny(2, 2, 8, 4), 8);
    let state = m.compress_context(&[]).unwrap();
    assert_eq!(state.n_compressed, 0);
    let toks = [4u32, 8, 15, 16, 23, 31];
    let a = m.decoder_forward(&state, &toks).unwrap();
    let b = plain_causal_lm(&m, &toks);
    assert_eq!(a.data(), b.data());
}

#[test]
fn zero_projections_hide_the_context() {
    let mut m = random_model(tiny(2, 2, 8, 4), 4);
    for &(pw, pb) in &m.decoder.proj.clone() {
        m.params.get_mut(pw).tensor.data_mut().fill(0.0);
        m.params.get_mut(pb).tensor.data_mut().fill(0.0);
    }
    let toks = [1u32, 2, 3];
    let s1 = m.compress_context(&[5, 6, 7, 8, 9, 10, 11, 12]).unwrap();
    let s2 = m.compress_context(&[30, 29, 28, 27, 26, 25, 24, 23]).unwrap();
    assert_ne!(s1.levels[1], s2.levels[1]);
    let a = m.decoder_forward(&s1, &toks).unwrap();
    let b = m.decoder_forward(&s2, &toks).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn decoder_is_causal_over_tokens() {
    let m = random_model(tiny(1, 2, 8, 4), 6);
    let state = m.compress_context(&[1, 2, 3, 4, 5]).unwrap();
    let base = [7u32, 8, 9, 10, 11];
    let a = m.decoder_forward(&state, &base).unwrap();
    for t in 0..base.len() {
        let mut p = base;
        p[t] = (p[t] + 13) % 32;
        let b = m.decoder_forward(&state, &p).unwrap();
        for i in 0..base.len() {
            let same = a.row(i) == b.row(i);
            assert_eq!(same, i < t, "position {i}, perturbed {t}");
        }
    }
}

#[test]
fn encoder_perturbation_stays_inside_its_segment() {
    let m = random_model(tiny(2, 1, 8, 4), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = random_tokens(&mut rng, 24, 32);
    let a = m.compress_context(&base).unwrap();
    for t in 0..24 {
        let mut p = base.clone();
        p[t] = (p[t] + 1) % 32;
        let b = m.compress_context(&p).unwrap();
        let (seg, within) = (t / 8, t % 8);
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            for row in 0..6 {
                let (rseg, ridx) = (row / 2, row % 2);
                let may_change = rseg == seg && ridx >= within / 4;
                if !may_change {
                    assert_eq!(la.row(row), lb.row(row), "t={t} row={row}");
                }
            }
        }
        // the last compressed row of the touched segment must move
        assert_ne!(a.levels[2].row(seg * 2 + 1), b.levels[2].row(seg * 2 + 1));
    }
}

#[test]
fn incremental_and_full_recompute_generation_agree() {
    for (seed, cfg) in [(1, tiny(2, 2, 8, 4)), (2, tiny(3, 2, 8, 2)), (3, tiny(1, 4, 8, 4))] {
        let m = random_model(cfg, seed);
        let state = m.compress_context(&[3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5]).unwrap();
        let a = m.generate(&state, &[7, 7], 6, None, DecodeMode::Incremental).unwrap();
        let b = m.generate(&state, &[7, 7], 6, None, DecodeMode::FullRecompute).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 8);

        let mut sess = DecoderSession::new(&m, &state).unwrap();
        let inc = sess.feed(&[7, 7, 2]).unwrap();
        let inc2 = sess.feed(&[9]).unwrap();
        let full = m.decoder_forward(&state, &[7, 7, 2, 9]).unwrap();
        for i in 0..3 {
            for (x, y) in inc.row(i).iter().zip(full.row(i)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        for (x, y) in inc2.row(0).iter().zip(full.row(3)) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn generation_edge_cases() {
    let m = random_model(tiny(1, 1, 8, 4), 2);
    let state = m.compress_context(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    let g = m.generate(&state, &[3, 4], 0, None, DecodeMode::Incremental).unwrap();
    assert_eq!(g.tokens, [3, 4]);
    assert!(!g.truncated);
    assert!(m.generate(&state, &[], 3, None, DecodeMode::Incremental).is_err());

    // capacity 18, 2 compressed rows: at most 16 decoder tokens
    let g = m.generate(&state, &[3, 4], 100, None, DecodeMode::Incremental).unwrap();
    assert_eq!(g.tokens.len(), 16);
    assert!(g.truncated);
    let f = m.generate(&state, &[3, 4], 100, None, DecodeMode::FullRecompute).unwrap();
    assert_eq!(g, f);

    let first = g.tokens[2];
    let e = m.generate(&state, &[3, 4], 100, Some(first), DecodeMode::Incremental).unwrap();
    assert_eq!(e.tokens, [3, 4, first]);
    assert!(e.stopped_on_eot);
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax_lowest(&[0.0f64, 2.0, 2.0, 1.0]), 1);
    assert_eq!(argmax_lowest(&[5.0f32]), 0);
    assert_eq!(argmax_lowest(&[-1.0f64, -1.0]), 0);
}

#[test]
fn layer_map_variants_run() {
    // more levels than slots (averaging) and fewer (duplication)
    for (enc, dec, incl) in [(5, 2, true), (1, 4, true), (2, 2, false)] {
        let mut cfg = tiny(enc, dec, 8, 4);
        cfg.include_embedding_level = incl;
        let m = random_model(cfg, 10);
        let s = m.compress_context(&[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(s.levels.len(), enc + usize::from(incl));
        let a = m.generate(&s, &[1], 4, None, DecodeMode::Incremental).unwrap();
        let b = m.generate(&s, &[1], 4, None, DecodeMode::FullRecompute).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn learned_positions_run_and_agree() {
    let mut cfg = tiny(2, 2, 8, 4);
    cfg.positional = PositionalScheme::Learned;
    let m = random_model(cfg, 13);
    let s = m.compress_context(&[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
    let a = m.generate(&s, &[1, 2], 5, None, DecodeMode::Incremental).unwrap();
    let b = m.generate(&s, &[1, 2], 5, None, DecodeMode::FullRecompute).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compressed_count_matches_ceil_rule(len in 0usize..40, seed in 0u64..1000) {
        let m = random_model(tiny(1, 1, 8, 4), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks = random_tokens(&mut rng, len, 32);
        let s = m.compress_context(&toks).unwrap_or_else(|_| CompressedState::empty(2, 8));
        if len <= 24 {
            let expect: usize = toks.chunks(8).map(|c| c.len().div_ceil(4)).sum();
            prop_assert_eq!(s.n_compressed, expect);
            prop_assert!(s.levels.iter().all(|l| l.rows() == expect));
        }
    }

    #[test]
    fn split_at_window_multiple_is_exact(k in 1usize..3, extra in 0usize..8, seed in 0u64..1000) {
        let m = random_model(tiny(2, 2, 8, 4), 22);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks = random_tokens(&mut rng, k * 8 + extra, 32);
        let joint = m.compress_context(&toks).unwrap();
        let split = m.compress_context(&toks[..k * 8]).unwrap()
            .concat(&m.compress_context(&toks[k * 8..]).unwrap());
        prop_assert_eq!(joint, split);
    }
}

#[test]
fn cached_compression_is_exact() {
    let m = random_model(tiny(2, 2, 8, 4), 30);
    let mut cache = SegmentCache::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tokens(&mut rng, 8, 32);
    let b = random_tokens(&mut rng, 8, 32);
    let ctx: Vec<u32> = [&a[..], &b, &a].concat();
    let plain = m.compress_context(&ctx).unwrap();
    let cached = m.compress_context_cached(&ctx, &mut cache).unwrap();
    assert_eq!(plain, cached);
    assert_eq!((cache.hits, cache.misses), (1, 2));
    assert_eq!(m.compress_context_cached(&ctx, &mut cache).unwrap(), plain);
    assert_eq!(cache.hits, 4);
    let tail = m.compress_context_cached(&a[..5], &mut cache).unwrap();
    assert_eq!(tail, m.compress_context(&a[..5]).unwrap());
}
