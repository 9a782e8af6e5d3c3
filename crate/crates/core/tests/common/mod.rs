#![allow(dead_code)]

use bicnet::numerics::{Tape, Tensor, Var};
use bicnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds `L·out·R` for fixed random row/column weights so any matrix
/// output becomes a scalar with a generic upstream gradient.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let (r, c) = match shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => panic!("scalarize supports rank 1 and 2"),
    };
    let out = if shape.len() == 1 {
        tape.reshape(out, &[1, c])?
    } else {
        out
    };
    let mut g = rng(seed ^ 0xabcdef);
    let left = tape.constant(uniform(&mut g, &[1, r], 1.0))?;
    let right = tape.constant(uniform(&mut g, &[c, 1], 1.0))?;
    let lo = tape.matmul(left, out)?;
    let s = tape.matmul(lo, right)?;
    tape.sum(s)
}

/// Max relative error between reverse-mode gradients and central
/// differences (step 1e-5) of `L·f(inputs)·R` over every input scalar.
pub fn op_grad_error(inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |inputs: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        let root = if tape.value(out).numel() == 1 && tape.value(out).rank() <= 1 {
            tape.sum(out).unwrap()
        } else {
            scalarize(&mut tape, out, seed).unwrap()
        };
        (tape, vars, root)
    };
    let (tape, vars, root) = eval(inputs);
    let analytic = tape.grads_wrt(root, &vars).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let (tp, _, rp) = eval(&plus);
            let (tm, _, rm) = eval(&minus);
            let numeric = (tp.value(rp).data()[0] - tm.value(rm).data()[0]) / (2.0 * h);
            worst = worst.max(rel_error(analytic[i].data()[k], numeric));
        }
    }
    worst
}

/// Max relative error between reverse-mode parameter gradients and central
/// differences of `L·f(session)·R` (or `f` itself when scalar).
pub fn param_grad_error(
    store: &mut bicnet::numerics::ParamStore<f64>,
    seed: u64,
    f: impl Fn(&mut bicnet::numerics::Session<'_, f64>) -> Result<Var>,
) -> f64 {
    use bicnet::numerics::Session;
    let value = |store: &bicnet::numerics::ParamStore<f64>| -> (f64, bicnet::numerics::Gradients<f64>) {
        let mut sess = Session::new(store);
        let out = f(&mut sess).unwrap();
        let root = if sess.value(out).numel() == 1 {
            sess.tape.sum(out).unwrap()
        } else {
            scalarize(&mut sess.tape, out, seed).unwrap()
        };
        let grads = sess.tape.backward(root).unwrap();
        (sess.value(root).data()[0], grads)
    };
    let (_, grads) = value(store);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for k in 0..analytic.numel() {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + h;
            let plus = value(store).0;
            store.value_mut(id).data_mut()[k] = original - h;
            let minus = value(store).0;
            store.value_mut(id).data_mut()[k] = original;
            worst = worst.max(rel_error(analytic.data()[k], (plus - minus) / (2.0 * h)));
        }
    }
    worst
}

/// Applies a row permutation: row `i` of the result is row `perm[i]`.
pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let rows: Vec<&[f64]> = perm.iter().map(|&p| t.row(p)).collect();
    Tensor::from_rows(&rows).unwrap()
}
