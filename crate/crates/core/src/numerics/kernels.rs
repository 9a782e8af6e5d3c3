//! Forward kernels on plain tensors. The tape calls these and adds the
//! matching backward rules; they are also usable directly for inference.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stabilizer added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn ensure_finite<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![S::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out += a(m×k) · b(k×n)`
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out += a(m×k) · b(n×k)ᵀ`
pub(crate) fn matmul_a_bt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: S = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            out[i * n + j] = out[i * n + j] + dot;
        }
    }
}

/// `out += a(k×m)ᵀ · b(k×n)`
pub(crate) fn matmul_at_b_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == S::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + api * bv;
            }
        }
    }
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = a.dims2("transpose")?;
    let src = a.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(src[i * c + j]);
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// (outer, extent, inner) strides for reducing along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let (outer, extent, inner) = axis_layout(x.shape(), axis);
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| o * extent * inner + e * inner + i;
            let max = (0..extent).map(|e| src[at(e)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for e in 0..extent {
                let v = (src[at(e)] - max).exp();
                out[at(e)] = v;
                total = total + v;
            }
            for e in 0..extent {
                out[at(e)] = out[at(e)] / total;
            }
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    ensure_finite(&out, "softmax")?;
    Ok(out)
}

/// Standard normal CDF via the error function.
pub fn normal_cdf<S: Scalar>(x: S) -> S {
    S::lit(0.5) * (S::one() + (x / S::lit(std::f64::consts::SQRT_2)).erf())
}

pub fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-(x * x) * S::lit(0.5)).exp()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative<S: Scalar>(x: S) -> S {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    ensure_finite(x, "gelu")?;
    Ok(x.map(gelu_scalar))
}

/// Normalized activations and per-row inverse standard deviations, kept
/// for the backward pass.
pub(crate) struct LayerNormCache<S> {
    pub normalized: Vec<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn layer_norm_with_cache<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "input {:?} needs gamma/beta of [{d}], got {:?} and {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.numel() / d;
    let dn = S::from_usize(d).expect("extent");
    let eps = S::lit(LAYER_NORM_EPS);
    let mut out = vec![S::zero(); x.numel()];
    let mut normalized = vec![S::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let inv = S::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let xh = (row[c] - mean) * inv;
            normalized[r * d + c] = xh;
            out[r * d + c] = xh * gamma.data()[c] + beta.data()[c];
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    ensure_finite(&out, "layer_norm")?;
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Normalizes each last-axis slice: `(x − μ)/η ⊙ γ + β` with
/// `η = sqrt(var + 1e-5)` (population variance).
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
    layer_norm_with_cache(x, gamma, beta).map(|(out, _)| out)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine",
            format!("vector lengths differ: {} vs {}", a.len(), b.len()),
        ));
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Ok(S::zero());
    }
    // Rounding can push |cos| a hair above one.
    Ok((dot / (na * nb)).max(-S::one()).min(S::one()))
}

/// All pairwise cosines between rows: `out[i][j] = cosine(a_i, b_j)`.
pub fn cosine_matrix<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (q, d) = a.dims2("cosine_matrix")?;
    let (v, d2) = b.dims2("cosine_matrix")?;
    if d != d2 {
        return Err(Error::dim(
            "cosine_matrix",
            format!("embedding dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(q * v);
    for i in 0..q {
        for j in 0..v {
            out.push(cosine(a.row(i), b.row(j))?);
        }
    }
    Ok(Tensor::from_parts(vec![q, v], out))
}
