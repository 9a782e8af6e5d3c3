mod common;

use bicnet::numerics::kernels::{gelu_scalar, layer_norm, matmul};
use bicnet::numerics::{ParamStore, Session, Tensor};
use bicnet::transformer::{
    aggregate, attention, evaluate, mlp, multi_head_attention, positional_add, t_block, AggregatorWeights, BlockConfig,
    BlockWeights, PositionalTable,
};
use bicnet::Error;
use common::{max_abs_diff, param_grad_error, permute_rows, rng, uniform};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn block(d: usize, heads: usize, hidden: usize, seed: u64) -> (ParamStore<f64>, BlockWeights) {
    let mut store = ParamStore::new();
    let cfg = BlockConfig::new(d, heads, hidden, 1).unwrap();
    let w = BlockWeights::register(&mut store, &mut rng(seed), "block", cfg).unwrap();
    (store, w)
}

/// Randomizes every parameter, including norms and biases that start at
/// constants.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut g = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = uniform(&mut g, &shape, 0.8);
    }
}

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (n, dk) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let mut weights = vec![0.0; n * n];
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..dk).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..n {
            weights[i * n + j] = (logits[j] - max).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += weights[i * n + j] * v.get2(j, c);
            }
        }
    }
    (
        Tensor::new(vec![n, dv], out).unwrap(),
        Tensor::new(vec![n, n], weights).unwrap(),
    )
}

fn run_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let store = ParamStore::new();
    let mut sess = Session::new(&store);
    let (qv, kv, vv) = (
        sess.tape.constant(q.clone()).unwrap(),
        sess.tape.constant(k.clone()).unwrap(),
        sess.tape.constant(v.clone()).unwrap(),
    );
    let (out, w) = attention(&mut sess, qv, kv, vv).unwrap();
    (sess.value(out).clone(), sess.value(w).clone())
}

#[test]
fn attention_single_key_returns_value() {
    let mut g = rng(10);
    let (q, k, v) = (
        uniform(&mut g, &[1, 3], 1.0),
        uniform(&mut g, &[1, 3], 1.0),
        uniform(&mut g, &[1, 2], 1.0),
    );
    let (out, w) = run_attention(&q, &k, &v);
    assert_eq!(out, v);
    assert_eq!(w.data(), &[1.0]);
}

#[test]
fn attention_identical_keys_average_values() {
    let mut g = rng(11);
    let q = uniform(&mut g, &[4, 3], 1.0);
    let row = uniform(&mut g, &[1, 3], 1.0);
    let k = Tensor::from_rows(&[row.data(), row.data(), row.data(), row.data()]).unwrap();
    let v = uniform(&mut g, &[4, 2], 1.0);
    let (out, _) = run_attention(&q, &k, &v);
    for i in 0..4 {
        for c in 0..2 {
            let mean = (0..4).map(|j| v.get2(j, c)).sum::<f64>() / 4.0;
            assert!((out.get2(i, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_naive_oracle() {
    let mut g = rng(12);
    let (q, k, v) = (
        uniform(&mut g, &[4, 3], 1.5),
        uniform(&mut g, &[4, 3], 1.5),
        uniform(&mut g, &[4, 3], 1.5),
    );
    let (out, w) = run_attention(&q, &k, &v);
    let (oracle_out, oracle_w) = naive_attention(&q, &k, &v);
    assert!(max_abs_diff(&out, &oracle_out) < 1e-6);
    assert!(max_abs_diff(&w, &oracle_w) < 1e-6);
}

#[test]
fn attention_rejects_mismatched_shapes() {
    let store = ParamStore::<f64>::new();
    let mut sess = Session::new(&store);
    let q = sess.tape.constant(Tensor::zeros(&[3, 2])).unwrap();
    let k = sess.tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(attention(&mut sess, q, k, k), Err(Error::Dimension { .. })));
}

fn mha_oracle(store: &ParamStore<f64>, w: &BlockWeights, x: &Tensor<f64>) -> Tensor<f64> {
    let mut heads = Vec::new();
    for h in &w.heads {
        let q = matmul(x, store.value(h.query)).unwrap();
        let k = matmul(x, store.value(h.key)).unwrap();
        let v = matmul(x, store.value(h.value)).unwrap();
        heads.push(naive_attention(&q, &k, &v).0);
    }
    let n = x.shape()[0];
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| heads.iter().flat_map(|h| h.row(i).to_vec()).collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    matmul(&Tensor::from_rows(&refs).unwrap(), store.value(w.output)).unwrap()
}

fn run_mha(store: &ParamStore<f64>, w: &BlockWeights, x: &Tensor<f64>) -> Tensor<f64> {
    evaluate(store, |sess| {
        let xv = sess.tape.constant(x.clone())?;
        multi_head_attention(sess, xv, w)
    })
    .unwrap()
}

#[test]
fn mha_single_head_is_attention_then_output() {
    let (store, w) = block(4, 1, 8, 13);
    let x = uniform(&mut rng(14), &[3, 4], 1.0);
    assert!(max_abs_diff(&run_mha(&store, &w, &x), &mha_oracle(&store, &w, &x)) < 1e-12);
}

#[test]
fn mha_zero_output_projection() {
    let (mut store, w) = block(4, 2, 8, 15);
    store.value_mut(w.output).data_mut().fill(0.0);
    let x = uniform(&mut rng(16), &[3, 4], 3.0);
    assert!(run_mha(&store, &w, &x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mha_matches_per_head_oracle() {
    let (store, w) = block(4, 2, 8, 17);
    let x = uniform(&mut rng(18), &[3, 4], 1.0);
    assert!(max_abs_diff(&run_mha(&store, &w, &x), &mha_oracle(&store, &w, &x)) < 1e-6);
}

#[test]
fn mha_head_inconsistency_is_config_error() {
    let (store, mut w) = block(4, 2, 8, 19);
    w.heads.pop();
    let err = evaluate(&store, |sess| {
        let x = sess.tape.constant(Tensor::zeros(&[2, 4]))?;
        multi_head_attention(sess, x, &w)
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn run_mlp(store: &ParamStore<f64>, w: &BlockWeights, x: &Tensor<f64>) -> Tensor<f64> {
    evaluate(store, |sess| {
        let xv = sess.tape.constant(x.clone())?;
        mlp(sess, xv, w)
    })
    .unwrap()
}

#[test]
fn mlp_zero_first_layer_yields_bias() {
    let (mut store, w) = block(3, 1, 5, 20);
    store.value_mut(w.mlp_in.weight).data_mut().fill(0.0);
    store.value_mut(w.mlp_in.bias.unwrap()).data_mut().fill(0.0);
    let c = [0.25, -2.0, 1.5];
    store.value_mut(w.mlp_out.bias.unwrap()).data_mut().copy_from_slice(&c);
    let out = run_mlp(&store, &w, &uniform(&mut rng(21), &[4, 3], 2.0));
    for r in 0..4 {
        assert_eq!(out.row(r), &c);
    }
}

#[test]
fn mlp_scalar_case() {
    let (mut store, w) = block(1, 1, 1, 22);
    store.value_mut(w.mlp_in.weight).data_mut()[0] = 1.0;
    store.value_mut(w.mlp_out.weight).data_mut()[0] = 1.0;
    let out = run_mlp(&store, &w, &Tensor::zeros(&[1, 1]));
    assert_eq!(out.data(), &[0.0]);
}

#[test]
fn mlp_matches_composition_oracle() {
    let (mut store, w) = block(3, 1, 4, 23);
    randomize(&mut store, 24);
    let x = uniform(&mut rng(25), &[2, 3], 1.0);
    let (w1, b1) = (store.value(w.mlp_in.weight), store.value(w.mlp_in.bias.unwrap()));
    let (w2, b2) = (store.value(w.mlp_out.weight), store.value(w.mlp_out.bias.unwrap()));
    let mut oracle = vec![0.0; 6];
    for i in 0..2 {
        let hidden: Vec<f64> = (0..4)
            .map(|h| gelu_scalar((0..3).map(|c| x.get2(i, c) * w1.get2(c, h)).sum::<f64>() + b1.data()[h]))
            .collect();
        for o in 0..3 {
            oracle[i * 3 + o] = (0..4).map(|h| hidden[h] * w2.get2(h, o)).sum::<f64>() + b2.data()[o];
        }
    }
    let oracle = Tensor::new(vec![2, 3], oracle).unwrap();
    assert!(max_abs_diff(&run_mlp(&store, &w, &x), &oracle) < 1e-6);
}

fn run_block(store: &ParamStore<f64>, w: &BlockWeights, x: &Tensor<f64>) -> Tensor<f64> {
    evaluate(store, |sess| {
        let xv = sess.tape.constant(x.clone())?;
        t_block(sess, xv, w)
    })
    .unwrap()
}

#[test]
fn t_block_zeroed_sublayers_is_identity() {
    let (mut store, w) = block(8, 2, 16, 26);
    w.zero_sublayer_outputs(&mut store);
    let x = uniform(&mut rng(27), &[5, 8], 4.0);
    assert_eq!(run_block(&store, &w, &x), x);
}

#[test]
fn t_block_single_row_closed_form() {
    let (mut store, w) = block(4, 2, 6, 28);
    randomize(&mut store, 29);
    let x = uniform(&mut rng(30), &[1, 4], 1.0);
    let ln = |y: &Tensor<f64>, norm: &bicnet::transformer::LayerNormWeights| {
        layer_norm(y, store.value(norm.gamma), store.value(norm.beta)).unwrap()
    };
    // One row attends only to itself, so each head is LN(X)·W^V_h.
    let normed = ln(&x, &w.norm_attn);
    let values: Vec<f64> = w
        .heads
        .iter()
        .flat_map(|h| matmul(&normed, store.value(h.value)).unwrap().into_data())
        .collect();
    let msa = matmul(&Tensor::new(vec![1, 4], values).unwrap(), store.value(w.output)).unwrap();
    let x1 = x.zip_map(&msa, |a, b| a + b);
    let hidden = matmul(&ln(&x1, &w.norm_mlp), store.value(w.mlp_in.weight)).unwrap();
    let row = |id| store.value(id).clone().reshape(&[1, store.value(id).numel()]).unwrap();
    let hidden = hidden.zip_map(&row(w.mlp_in.bias.unwrap()), |a, b| gelu_scalar(a + b));
    let mlp_out = matmul(&hidden, store.value(w.mlp_out.weight)).unwrap();
    let mlp_out = mlp_out.zip_map(&row(w.mlp_out.bias.unwrap()), |a, b| a + b);
    let oracle = x1.zip_map(&mlp_out, |a, b| a + b);
    assert!(max_abs_diff(&run_block(&store, &w, &x), &oracle) < 1e-12);
}

#[test]
fn t_block_gradient_check() {
    for seed in 0..3 {
        let (mut store, w) = block(4, 2, 6, 31 + seed);
        randomize(&mut store, 40 + seed);
        let x = uniform(&mut rng(50 + seed), &[3, 4], 1.0);
        let err = param_grad_error(&mut store, seed, |sess| {
            let xv = sess.tape.constant(x.clone())?;
            t_block(sess, xv, &w)
        });
        assert!(err < 1e-4, "seed {seed}: {err:.3e}");
    }
}

fn aggregator(d: usize, seed: u64) -> (ParamStore<f64>, AggregatorWeights) {
    let mut store = ParamStore::new();
    let w = AggregatorWeights::register(&mut store, &mut rng(seed), "pool", d).unwrap();
    (store, w)
}

fn run_aggregate(store: &ParamStore<f64>, w: &AggregatorWeights, x: &Tensor<f64>) -> Tensor<f64> {
    evaluate(store, |sess| {
        let xv = sess.tape.constant(x.clone())?;
        aggregate(sess, xv, w)
    })
    .unwrap()
}

#[test]
fn aggregate_examples() {
    let (mut store, w) = aggregator(4, 60);
    let mut g = rng(61);
    let single = uniform(&mut g, &[1, 4], 1.0);
    assert_eq!(run_aggregate(&store, &w, &single), single);

    let row = uniform(&mut g, &[1, 4], 1.0);
    let same = Tensor::from_rows(&[row.data(), row.data(), row.data()]).unwrap();
    assert!(max_abs_diff(&run_aggregate(&store, &w, &same), &row) < 1e-15);

    store.value_mut(w.query).data_mut().fill(0.0);
    let x = uniform(&mut g, &[5, 4], 1.0);
    let mean: Vec<f64> = (0..4)
        .map(|c| (0..5).map(|r| x.get2(r, c)).sum::<f64>() / 5.0)
        .collect();
    let out = run_aggregate(&store, &w, &x);
    assert!(max_abs_diff(&out, &Tensor::new(vec![1, 4], mean).unwrap()) < 1e-15);
}

#[test]
fn aggregate_gradient_check() {
    let (mut store, w) = aggregator(4, 62);
    randomize(&mut store, 63);
    let x = uniform(&mut rng(64), &[5, 4], 1.0);
    let err = param_grad_error(&mut store, 1, |sess| {
        let xv = sess.tape.constant(x.clone())?;
        aggregate(sess, xv, &w)
    });
    assert!(err < 1e-4, "{err:.3e}");
}

fn table(enabled: bool, max_len: usize) -> (ParamStore<f64>, PositionalTable) {
    let mut store = ParamStore::new();
    let p = PositionalTable::register(&mut store, &mut rng(70), "pos", max_len, 3, enabled).unwrap();
    (store, p)
}

fn run_positional(store: &ParamStore<f64>, p: &PositionalTable, x: &Tensor<f64>) -> bicnet::Result<Tensor<f64>> {
    evaluate(store, |sess| {
        let xv = sess.tape.constant(x.clone())?;
        positional_add(sess, xv, p)
    })
}

#[test]
fn positional_examples() {
    let x = uniform(&mut rng(71), &[4, 3], 1.0);
    let (store, off) = table(false, 4);
    assert!(!off.enabled());
    assert_eq!(run_positional(&store, &off, &x).unwrap(), x);

    let (mut store, on) = table(true, 4);
    store.value_mut(on.table.unwrap()).data_mut().fill(0.0);
    assert_eq!(run_positional(&store, &on, &x).unwrap(), x);

    let (store, on) = table(true, 4);
    let perm = [2, 0, 3, 1];
    let permuted_out = run_positional(&store, &on, &permute_rows(&x, &perm)).unwrap();
    let out_permuted = permute_rows(&run_positional(&store, &on, &x).unwrap(), &perm);
    assert!(max_abs_diff(&permuted_out, &out_permuted) > 1e-3);
}

#[test]
fn positional_capacity_error() {
    let (store, on) = table(true, 3);
    let x = Tensor::zeros(&[4, 3]);
    assert!(matches!(
        run_positional(&store, &on, &x),
        Err(Error::Capacity { len: 4, max_len: 3 })
    ));
}

#[test]
fn block_config_validation() {
    assert!(BlockConfig::new(8, 3, 16, 1).is_err());
    assert!(BlockConfig::new(8, 4, 16, 0).is_err());
    assert_eq!(BlockConfig::new(8, 4, 16, 2).unwrap().head_dim(), 2);
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn t_block_is_permutation_equivariant(n in 1usize..7, seed in any::<u64>()) {
        let (mut store, w) = block(8, 4, 12, seed);
        randomize(&mut store, seed ^ 1);
        let x = uniform(&mut rng(seed ^ 2), &[n, 8], 2.0);
        let perm = permutation(n, seed ^ 3);
        let lhs = run_block(&store, &w, &permute_rows(&x, &perm));
        let rhs = permute_rows(&run_block(&store, &w, &x), &perm);
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-6);
    }

    #[test]
    fn aggregate_is_permutation_invariant(n in 1usize..8, seed in any::<u64>()) {
        let (mut store, w) = aggregator(6, seed);
        randomize(&mut store, seed ^ 5);
        let x = uniform(&mut rng(seed ^ 6), &[n, 6], 2.0);
        let perm = permutation(n, seed ^ 7);
        let a = run_aggregate(&store, &w, &x);
        let b = run_aggregate(&store, &w, &permute_rows(&x, &perm));
        prop_assert!(max_abs_diff(&a, &b) < 1e-6);
    }

    #[test]
    fn attention_rows_are_stochastic(n in 1usize..7, seed in any::<u64>()) {
        let mut g = rng(seed);
        let (q, k, v) = (uniform(&mut g, &[n, 3], 4.0), uniform(&mut g, &[n, 3], 4.0), uniform(&mut g, &[n, 2], 1.0));
        let (_, w) = run_attention(&q, &k, &v);
        for r in 0..n {
            prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
