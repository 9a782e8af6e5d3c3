//! Pre-norm transformer block, single-query attention pooling and learned
//! positional tables.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Scalar, Session, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub layers: usize,
}

impl BlockConfig {
    pub fn new(model_dim: usize, heads: usize, mlp_hidden: usize, layers: usize) -> Result<Self> {
        let cfg = BlockConfig {
            model_dim,
            heads,
            mlp_hidden,
            layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(format!("block dimensions must be positive: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("transformer depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormWeights {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormWeights {
            gamma: store.register(format!("{prefix}.gamma"), init::ones(&[dim]))?,
            beta: store.register(format!("{prefix}.beta"), init::zeros(&[dim]))?,
        })
    }

    pub fn apply<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        sess.tape.layer_norm(x, gamma, beta)
    }
}

/// Row-wise affine map `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = store.register(format!("{prefix}.weight"), init::xavier_uniform(rng, in_dim, out_dim))?;
        let bias = if with_bias {
            Some(store.register(format!("{prefix}.bias"), init::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn apply<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let width = sess.value(x).last_dim();
        if width != self.in_dim {
            return Err(Error::Config(format!(
                "linear layer expects {}-wide rows, got {width}",
                self.in_dim
            )));
        }
        let w = sess.param(self.weight);
        let y = sess.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = sess.param(b);
                sess.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadWeights {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Weights of one transformer layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockWeights {
    pub config: BlockConfig,
    pub heads: Vec<HeadWeights>,
    pub output: ParamId,
    pub norm_attn: LayerNormWeights,
    pub norm_mlp: LayerNormWeights,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl BlockWeights {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        config: BlockConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let dh = config.head_dim();
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let p = format!("{prefix}.attn.head{h}");
            heads.push(HeadWeights {
                query: store.register(format!("{p}.query"), init::xavier_uniform(rng, d, dh))?,
                key: store.register(format!("{p}.key"), init::xavier_uniform(rng, d, dh))?,
                value: store.register(format!("{p}.value"), init::xavier_uniform(rng, d, dh))?,
            });
        }
        let output = store.register(
            format!("{prefix}.attn.output"),
            init::xavier_uniform(rng, config.heads * dh, d),
        )?;
        let norm_attn = LayerNormWeights::register(store, &format!("{prefix}.norm_attn"), d)?;
        let norm_mlp = LayerNormWeights::register(store, &format!("{prefix}.norm_mlp"), d)?;
        let mlp_in = Linear::register(store, rng, &format!("{prefix}.mlp.fc1"), d, config.mlp_hidden, true)?;
        let mlp_out = Linear::register(store, rng, &format!("{prefix}.mlp.fc2"), config.mlp_hidden, d, true)?;
        Ok(BlockWeights {
            config,
            heads,
            output,
            norm_attn,
            norm_mlp,
            mlp_in,
            mlp_out,
        })
    }

    /// Zeroes W^O, W_2 and b_2 so both residual sublayers contribute nothing.
    pub fn zero_sublayer_outputs<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let mut targets = vec![self.output, self.mlp_out.weight];
        targets.extend(self.mlp_out.bias);
        for id in targets {
            store.value_mut(id).data_mut().fill(S::zero());
        }
    }
}

/// Stack of identical-shape layers.
pub fn register_stack<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    prefix: &str,
    config: BlockConfig,
) -> Result<Vec<BlockWeights>> {
    (0..config.layers)
        .map(|l| BlockWeights::register(store, rng, &format!("{prefix}.layer{l}"), config))
        .collect()
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V`. Returns the output
/// and the row-stochastic weight matrix.
pub fn attention<S: Scalar>(sess: &mut Session<'_, S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (n, dk) = sess.value(q).dims2("attention")?;
    let (nk, dk2) = sess.value(k).dims2("attention")?;
    let (nv, _) = sess.value(v).dims2("attention")?;
    if n == 0 || nk != n || nv != n || dk != dk2 {
        return Err(Error::dim(
            "attention",
            format!(
                "incompatible Q {:?}, K {:?}, V {:?}",
                sess.value(q).shape(),
                sess.value(k).shape(),
                sess.value(v).shape()
            ),
        ));
    }
    let kt = sess.tape.transpose(k)?;
    let logits = sess.tape.matmul(q, kt)?;
    let logits = sess.tape.scale(logits, S::one() / S::lit(dk as f64).sqrt())?;
    let weights = sess.tape.softmax(logits, 1)?;
    let out = sess.tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// `Concat(head_1..head_M)·W^O` with `head_i = attention(XW^Q_i, XW^K_i, XW^V_i)`.
pub fn multi_head_attention<S: Scalar>(sess: &mut Session<'_, S>, x: Var, w: &BlockWeights) -> Result<Var> {
    if w.heads.len() != w.config.heads {
        return Err(Error::Config(format!(
            "block declares {} heads but carries weights for {}",
            w.config.heads,
            w.heads.len()
        )));
    }
    let mut outputs = Vec::with_capacity(w.heads.len());
    for (h, head) in w.heads.iter().enumerate() {
        let (wq, wk, wv) = (sess.param(head.query), sess.param(head.key), sess.param(head.value));
        let q = sess.tape.matmul(x, wq)?;
        let k = sess.tape.matmul(x, wk)?;
        let v = sess.tape.matmul(x, wv)?;
        let (out, weights) = attention(sess, q, k, v)?;
        if sess.capturing() {
            sess.record_attention(&format!("head{h}"), weights);
        }
        outputs.push(out);
    }
    let concat = if outputs.len() == 1 {
        outputs[0]
    } else {
        sess.tape.concat_cols(&outputs)?
    };
    let wo = sess.param(w.output);
    sess.tape.matmul(concat, wo)
}

/// `GELU(XW_1 + b_1)W_2 + b_2`
pub fn mlp<S: Scalar>(sess: &mut Session<'_, S>, x: Var, w: &BlockWeights) -> Result<Var> {
    let hidden = w.mlp_in.apply(sess, x)?;
    let hidden = sess.tape.gelu(hidden)?;
    w.mlp_out.apply(sess, hidden)
}

/// `X' = X + MSA(LN(X))`, then `X'' = X' + MLP(LN(X'))`.
pub fn t_block<S: Scalar>(sess: &mut Session<'_, S>, x: Var, w: &BlockWeights) -> Result<Var> {
    let normed = w.norm_attn.apply(sess, x)?;
    let attended = multi_head_attention(sess, normed, w)?;
    let x1 = sess.tape.add(x, attended)?;
    let normed = w.norm_mlp.apply(sess, x1)?;
    let transformed = mlp(sess, normed, w)?;
    sess.tape.add(x1, transformed)
}

/// Learned single-query attention pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorWeights {
    pub query: ParamId,
    pub norm: LayerNormWeights,
    pub dim: usize,
}

impl AggregatorWeights {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(AggregatorWeights {
            query: store.register(format!("{prefix}.query"), init::xavier_uniform(rng, dim, 1))?,
            norm: LayerNormWeights::register(store, &format!("{prefix}.norm"), dim)?,
            dim,
        })
    }
}

/// Pools `n×d` rows into one `1×d` row: `α = softmax_i(q·LN(x_i)/√d)`,
/// output `Σ α_i x_i`.
pub fn aggregate<S: Scalar>(sess: &mut Session<'_, S>, x: Var, w: &AggregatorWeights) -> Result<Var> {
    let (n, d) = sess.value(x).dims2("aggregate")?;
    if n == 0 {
        return Err(Error::dim("aggregate", "no rows to pool"));
    }
    if d != w.dim {
        return Err(Error::dim(
            "aggregate",
            format!("aggregator expects {}-wide rows, got {d}", w.dim),
        ));
    }
    let normed = w.norm.apply(sess, x)?;
    let q = sess.param(w.query);
    let logits = sess.tape.matmul(normed, q)?;
    let logits = sess.tape.scale(logits, S::one() / S::lit(d as f64).sqrt())?;
    let alpha = sess.tape.softmax(logits, 0)?;
    if sess.capturing() {
        sess.record_attention("pool", alpha);
    }
    let alpha_t = sess.tape.transpose(alpha)?;
    sess.tape.matmul(alpha_t, x)
}

/// Learned additive position table. Disabled tables leave their input
/// untouched and own no parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalTable {
    pub table: Option<ParamId>,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionalTable {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        max_len: usize,
        dim: usize,
        enabled: bool,
    ) -> Result<Self> {
        let table = if enabled {
            Some(store.register(format!("{prefix}.table"), init::xavier_uniform(rng, max_len, dim))?)
        } else {
            None
        };
        Ok(PositionalTable { table, max_len, dim })
    }

    pub fn enabled(&self) -> bool {
        self.table.is_some()
    }
}

/// `X + table[0..n]` when enabled, `X` otherwise.
pub fn positional_add<S: Scalar>(sess: &mut Session<'_, S>, x: Var, p: &PositionalTable) -> Result<Var> {
    let (n, d) = sess.value(x).dims2("positional_add")?;
    let Some(table) = p.table else {
        return Ok(x);
    };
    if n > p.max_len {
        return Err(Error::Capacity {
            len: n,
            max_len: p.max_len,
        });
    }
    if d != p.dim {
        return Err(Error::dim(
            "positional_add",
            format!("table is {}-wide, input rows are {d}-wide", p.dim),
        ));
    }
    let table = sess.param(table);
    let rows = sess.tape.slice_rows(table, 0, n)?;
    sess.tape.add(x, rows)
}

/// Runs `f` in a fresh session and returns the value of the node it builds.
pub fn evaluate<S: Scalar>(
    store: &ParamStore<S>,
    f: impl FnOnce(&mut Session<'_, S>) -> Result<Var>,
) -> Result<Tensor<S>> {
    let mut sess = Session::new(store);
    let v = f(&mut sess)?;
    Ok(sess.value(v).clone())
}
