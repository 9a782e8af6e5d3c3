//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A [`Tape`] is built fresh for each forward pass. Nodes are appended in
//! evaluation order, so walking the record backwards is a valid reverse
//! topological order and the record cannot contain cycles.

use std::collections::HashMap;

use super::kernels::{self, ensure_finite, LayerNormCache};
use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<S>,
    },
    MeanRows(Var),
    Sum(Var),
    CosineMatrix(Var, Var),
    Triplet {
        scores: Var,
        margin: S,
        hardest: bool,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    leaves: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, name: &'static str) -> Result<Var> {
        ensure_finite(&value, name)?;
        self.nodes.push(Node { value, op, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients reaching it are discarded.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                "add",
                format!("shapes differ: {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a length-d vector to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let d = vx.last_dim();
        if vr.numel() != d {
            return Err(Error::dim(
                "add_row",
                format!("cannot broadcast {:?} over {:?}", vr.shape(), vx.shape()),
            ));
        }
        let bias = vr.data();
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().zip(bias).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(x))?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} out of {c}", start + len),
            ));
        }
        let data = (0..r)
            .flat_map(|i| vx.row(i)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::from_parts(vec![r, len], data);
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_parts(vec![len, c], data);
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate"))?;
        let (rows, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts differ: {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let (_, cols) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x))?;
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta))?;
        self.push(out, Op::LayerNorm { x, gamma, beta, cache }, "layer_norm")
    }

    /// Mean over the rows of a matrix, giving a 1×d row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("mean_rows")?;
        let inv = S::one() / S::from_usize(r).expect("extent");
        let mut acc = vec![S::zero(); c];
        for i in 0..r {
            for (a, &v) in acc.iter_mut().zip(vx.row(i)) {
                *a = *a + v;
            }
        }
        let out = Tensor::from_parts(vec![1, c], acc.into_iter().map(|v| v * inv).collect());
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    /// Pairwise row cosines, `out[i][j] = cos(a_i, b_j)`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::cosine_matrix(self.value(a), self.value(b))?;
        self.push(out, Op::CosineMatrix(a, b), "cosine_matrix")
    }

    /// Hinge triplet loss over a square batch score matrix whose diagonal
    /// holds the positive pairs; see [`crate::retrieval::triplet_loss_value`].
    pub fn triplet_loss(&mut self, scores: Var, margin: S, hardest: bool) -> Result<Var> {
        let value = crate::retrieval::triplet_loss_value(self.value(scores), margin, hardest)?;
        self.push(
            Tensor::scalar(value),
            Op::Triplet {
                scores,
                margin,
                hardest,
            },
            "triplet_loss",
        )
    }

    /// Gradient of a scalar root with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_seeded(&[(root, Tensor::full(self.shape(root), S::one()))])
    }

    /// Backward pass starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<S>)]) -> Result<Gradients<S>> {
        let grads = self.propagate(seeds)?;
        let mut out = Gradients::default();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                ensure_finite(&g, "backward")?;
                out.by_param.insert(pid, g);
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar root with respect to arbitrary leaves, zero
    /// where a leaf does not influence the root.
    pub fn grads_wrt(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor<S>>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads = self.propagate(&[(root, Tensor::full(self.shape(root), S::one()))])?;
        wrt.iter()
            .map(|v| {
                let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                ensure_finite(&g, "backward")?;
                Ok(g)
            })
            .collect()
    }

    fn propagate(&self, seeds: &[(Var, Tensor<S>)]) -> Result<Vec<Option<Tensor<S>>>> {
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::dim(
                    "backward",
                    format!("seed {:?} does not match node {:?}", g.shape(), self.shape(*v)),
                ));
            }
            accumulate(&mut grads[v.0], g.clone());
            start = start.max(v.0 + 1);
        }
        for id in (0..start).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g)? {
                if input.0 >= id {
                    return Err(Error::Internal(format!(
                        "node {id} reads node {} recorded after it",
                        input.0
                    )));
                }
                accumulate(&mut grads[input.0], contribution);
            }
        }
        Ok(grads)
    }

    fn local_grads(&self, id: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2("matmul")?;
                let (_, n) = vb.dims2("matmul")?;
                let mut ga = vec![S::zero(); m * k];
                kernels::matmul_a_bt_into(g.data(), vb.data(), &mut ga, m, n, k);
                let mut gb = vec![S::zero(); k * n];
                kernels::matmul_at_b_into(va.data(), g.data(), &mut gb, m, k, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], ga)),
                    (*b, Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, row) => {
                let d = g.last_dim();
                let mut gr = vec![S::zero(); d];
                for chunk in g.data().chunks(d) {
                    for (acc, &v) in gr.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                let row_shape = self.shape(*row).to_vec();
                vec![(*x, g.clone()), (*row, Tensor::from_parts(row_shape, gr))]
            }
            Op::Scale(x, factor) => vec![(*x, g.map(|v| v * *factor))],
            Op::Transpose(x) => vec![(*x, kernels::transpose(g)?)],
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_cols")?;
                let len = g.last_dim();
                let mut gx = vec![S::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                vec![(*x, Tensor::from_parts(vec![r, c], gx))]
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_rows")?;
                let mut gx = vec![S::zero(); r * c];
                gx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![(*x, Tensor::from_parts(vec![r, c], gx))]
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let data = (0..rows)
                        .flat_map(|i| g.row(i)[offset..offset + w].iter().copied())
                        .collect();
                    res.push((p, Tensor::from_parts(vec![rows, w], data)));
                    offset += w;
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).numel();
                    let shape = self.shape(p).to_vec();
                    res.push((p, Tensor::from_parts(shape, g.data()[offset..offset + n].to_vec())));
                    offset += n;
                }
                res
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                vec![(*x, g.clone().reshape(&shape)?)]
            }
            Op::Softmax { x, axis } => {
                let (outer, extent, inner) = kernels::axis_layout(out.shape(), *axis);
                let (y, gy) = (out.data(), g.data());
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| o * extent * inner + e * inner + i;
                        let dot: S = (0..extent).map(|e| gy[at(e)] * y[at(e)]).sum();
                        for e in 0..extent {
                            gx[at(e)] = y[at(e)] * (gy[at(e)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), gx))]
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                vec![(*x, vx.zip_map(g, |xv, gv| gv * kernels::gelu_derivative(xv)))]
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let d = g.last_dim();
                let dn = S::from_usize(d).expect("extent");
                let gam = self.value(*gamma).data();
                let mut gx = vec![S::zero(); g.numel()];
                let mut ggamma = vec![S::zero(); d];
                let mut gbeta = vec![S::zero(); d];
                for (r, &inv) in cache.inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xh = &cache.normalized[r * d..(r + 1) * d];
                    let mut mean_gh = S::zero();
                    let mut mean_gh_xh = S::zero();
                    for c in 0..d {
                        let gh = gr[c] * gam[c];
                        mean_gh = mean_gh + gh;
                        mean_gh_xh = mean_gh_xh + gh * xh[c];
                        ggamma[c] = ggamma[c] + gr[c] * xh[c];
                        gbeta[c] = gbeta[c] + gr[c];
                    }
                    mean_gh = mean_gh / dn;
                    mean_gh_xh = mean_gh_xh / dn;
                    for c in 0..d {
                        let gh = gr[c] * gam[c];
                        gx[r * d + c] = inv * (gh - mean_gh - xh[c] * mean_gh_xh);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(g.shape().to_vec(), gx)),
                    (*gamma, Tensor::from_parts(vec![d], ggamma)),
                    (*beta, Tensor::from_parts(vec![d], gbeta)),
                ]
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2("mean_rows")?;
                let inv = S::one() / S::from_usize(r).expect("extent");
                let row: Vec<S> = g.data().iter().map(|&v| v * inv).collect();
                let data = (0..r).flat_map(|_| row.iter().copied()).collect();
                vec![(*x, Tensor::from_parts(vec![r, c], data))]
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(self.shape(*x), gv))]
            }
            Op::CosineMatrix(a, b) => {
                let (ga, gb) = cosine_matrix_backward(self.value(*a), self.value(*b), g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Triplet {
                scores,
                margin,
                hardest,
            } => {
                let gs = crate::retrieval::triplet_loss_grad(self.value(*scores), *margin, *hardest)?;
                let gv = g.data()[0];
                vec![(*scores, gs.map(|v| v * gv))]
            }
        };
        Ok(grads)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn cosine_matrix_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (q, d) = a.dims2("cosine_matrix")?;
    let (v, _) = b.dims2("cosine_matrix")?;
    let norm = |r: &[S]| r.iter().map(|&x| x * x).sum::<S>().sqrt();
    let na: Vec<S> = (0..q).map(|i| norm(a.row(i))).collect();
    let nb: Vec<S> = (0..v).map(|j| norm(b.row(j))).collect();
    let mut ga = vec![S::zero(); q * d];
    let mut gb = vec![S::zero(); v * d];
    for i in 0..q {
        for j in 0..v {
            let gij = g.get2(i, j);
            if na[i] == S::zero() || nb[j] == S::zero() || gij == S::zero() {
                continue;
            }
            let (ar, br) = (a.row(i), b.row(j));
            let dot: S = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            let denom = na[i] * nb[j];
            let cos = dot / denom;
            let ca = cos / (na[i] * na[i]);
            let cb = cos / (nb[j] * nb[j]);
            for c in 0..d {
                ga[i * d + c] = ga[i * d + c] + gij * (br[c] / denom - ca * ar[c]);
                gb[j * d + c] = gb[j * d + c] + gij * (ar[c] / denom - cb * br[c]);
            }
        }
    }
    Ok((Tensor::from_parts(vec![q, d], ga), Tensor::from_parts(vec![v, d], gb)))
}
