use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::causal_bias;
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_zero() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let b = g.input(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    assert_eq!(g.shape(c), &[2, 1]);

    let z1 = g.input(Tensor::from_rows(&[&[2.0]]).unwrap());
    let z2 = g.input(Tensor::from_rows(&[&[0.0]]).unwrap());
    let z = g.matmul(z1, z2).unwrap();
    assert_eq!(g.value(z).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = ParamStore::<f64>::new();
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let oracle = triple_loop(&a, &b);
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(a), g.input(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn layernorm_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let gain = g.input(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
    let bias = g.input(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
    let x = g.input(Tensor::from_rows(&[&[5.0, 5.0, 5.0, 5.0]]).unwrap());
    let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain2 = g.input(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
    let bias2 = g.input(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
    let x2 = g.input(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
    let y2 = g.layernorm(x2, gain2, bias2, 1e-12).unwrap();
    let d = g.value(y2).data();
    assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);

    assert!(matches!(g.layernorm(x2, gain2, bias2, 0.0), Err(Error::Parameter(_))));
}

#[test]
fn layernorm_random_row_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(rand_tensor(&mut rng, &[1, 32]));
    let gain = g.input(Tensor::new(vec![32], vec![1.0; 32]).unwrap());
    let bias = g.input(Tensor::new(vec![32], vec![0.0; 32]).unwrap());
    let y = g.layernorm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 32.0;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_uniform_logits_is_ln_vocab() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let logits = g.input(Tensor::matrix(1, 7, vec![0.3; 7]).unwrap());
    let l = g.softmax_cross_entropy(logits, &[2], &[1]).unwrap();
    assert!((scalar_value(&g, l) - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_empty_mask_is_an_error() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let logits = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    assert_eq!(g.softmax_cross_entropy(logits, &[0, 1], &[0, 0]), Err(Error::EmptyLoss));
}

#[test]
fn cross_entropy_matches_per_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = ParamStore::<f64>::new();
    let (rows, vocab) = (6, 5);
    let t = rand_tensor(&mut rng, &[rows, vocab]);
    let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..vocab as u32)).collect();
    let mask = [1u8, 0, 1, 1, 0, 1];
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..rows {
        if mask[i] == 0 {
            continue;
        }
        let row = t.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        sum += -(row[targets[i] as usize].exp() / z).ln();
        count += 1.0;
    }
    let mut g = Graph::new(&store);
    let logits = g.input_with_grad(t);
    let l = g.softmax_cross_entropy(logits, &targets, &mask).unwrap();
    assert!((scalar_value(&g, l) - sum / count).abs() < 1e-9);

    // Masked rows get exactly zero gradient.
    let mut pg = ParamGrads::zeros_like(&store);
    let grads = g.backward(l, &mut pg).unwrap();
    let gl = grads.of(logits).unwrap();
    for i in [1usize, 4] {
        assert!(gl[i * vocab..(i + 1) * vocab].iter().all(|v| *v == 0.0));
    }
}

/// Checks `op`'s input gradients against central differences.
fn check_inputs<F>(inputs: Vec<Tensor<f64>>, op: F)
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let store = ParamStore::<f64>::new();
    let h = 1e-6;
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = op(&mut g, &vars);
    // Weight outputs so the check does not reduce to a plain sum.
    let w: Vec<f64> = (0..g.value(out).len()).map(|i| 0.5 + (i % 7) as f64 * 0.1).collect();
    let wv = g.input(Tensor::new(g.shape(out).to_vec(), w.clone()).unwrap());
    let weighted = g.mul(out, wv).unwrap();
    let loss = g.sum(weighted);
    let mut pg = ParamGrads::zeros_like(&store);
    let grads = g.backward(loss, &mut pg).unwrap();
    let weighted_eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars);
        let wv = g.input(Tensor::new(g.shape(out).to_vec(), w.clone()).unwrap());
        let m = g.mul(out, wv).unwrap();
        let s = g.sum(m);
        scalar_value(&g, s)
    };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).unwrap();
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (weighted_eval(&plus) - weighted_eval(&minus)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < 1e-5, "input {k} index {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }
}

#[test]
fn primitive_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);

    check_inputs(vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.add(v[0], v[1]).unwrap());
    check_inputs(vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.mul(v[0], v[1]).unwrap());
    check_inputs(vec![r(&[3, 4])], |g, v| g.scale(v[0], -1.7));
    check_inputs(vec![r(&[3, 4]), r(&[4, 2])], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_inputs(vec![r(&[3, 4]), r(&[4, 5]), r(&[5])], |g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    check_inputs(vec![r(&[3, 6]), r(&[6]), r(&[6])], |g, v| {
        g.layernorm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check_inputs(vec![r(&[3, 4])], |g, v| g.gelu(v[0]));
    check_inputs(vec![r(&[5, 3])], |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap());
    check_inputs(vec![r(&[2, 3]), r(&[3, 3])], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
    check_inputs(vec![r(&[5, 3])], |g, v| g.slice_rows(v[0], 1, 3).unwrap());
    check_inputs(vec![r(&[5, 3])], |g, v| g.gather_rows(v[0], &[4, 1, 1]).unwrap());
    check_inputs(vec![r(&[5, 3]), r(&[2, 3])], |g, v| g.add_rows_at(v[0], v[1], 2).unwrap());
    check_inputs(vec![r(&[4, 8])], |g, v| g.rotary(v[0], &[0, 3, 9, 40], 2, 10_000.0).unwrap());
    let bias = Tensor::new(vec![4, 4], causal_bias::<f64>(4)).unwrap();
    check_inputs(vec![r(&[4, 8]), r(&[4, 8]), r(&[4, 8])], move |g, v| {
        g.attention(v[0], v[1], v[2], &bias, 2).unwrap()
    });
    let cross = Tensor::new(vec![2, 3], vec![0.0, -0.5, 0.25, 0.1, 0.0, -1e9]).unwrap();
    check_inputs(vec![r(&[2, 4]), r(&[3, 4]), r(&[3, 4])], move |g, v| {
        g.attention(v[0], v[1], v[2], &cross, 1).unwrap()
    });
    check_inputs(vec![r(&[3, 5])], |g, v| g.softmax_cross_entropy(v[0], &[1, 4, 0], &[1, 0, 1]).unwrap());
}

#[test]
fn attention_with_shared_inputs_accumulates_all_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let bias = Tensor::new(vec![3, 3], causal_bias::<f64>(3)).unwrap();
    check_inputs(vec![rand_tensor(&mut rng, &[3, 4])], move |g, v| {
        g.attention(v[0], v[0], v[0], &bias, 2).unwrap()
    });
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::scalar(2.0)).unwrap();
    let b = store.insert("b", Tensor::scalar(3.0)).unwrap();
    store.get_mut(b).trainable = false;
    let mut g = Graph::new(&store);
    let (va, vb) = (g.param(a), g.param(b));
    let m = g.mul(va, vb).unwrap();
    let l = g.sum(m);
    let mut pg = ParamGrads::zeros_like(&store);
    g.backward(l, &mut pg).unwrap();
    assert_eq!(pg.get(a), &[3.0]);
    assert_eq!(pg.get(b), &[0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = ParamStore::<f32>::new();
            let mut g = Graph::new(&store);
            let n = rows * cols;
            let x = g.input(Tensor::matrix(rows, cols, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap());
            let w = g.input(Tensor::matrix(cols, cols, (0..cols * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap());
            let y = g.matmul(x, w).unwrap();
            let z = g.gelu(y);
            g.value(z).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn masked_rows_never_change_the_loss(seed in any::<u64>(), scale in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, &[4, 6]);
        let mut scaled = t.clone();
        for j in 0..6 {
            scaled.data_mut()[6 + j] *= scale;
        }
        let store = ParamStore::<f64>::new();
        let mask = [1u8, 0, 1, 1];
        let mut g = Graph::new(&store);
        let a = g.input(t);
        let b = g.input(scaled);
        let la = g.softmax_cross_entropy(a, &[0, 1, 2, 3], &mask).unwrap();
        let lb = g.softmax_cross_entropy(b, &[0, 1, 2, 3], &mask).unwrap();
        prop_assert_eq!(scalar_value(&g, la), scalar_value(&g, lb));
    }
}
