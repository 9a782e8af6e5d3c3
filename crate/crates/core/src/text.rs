//! Text branch over precomputed per-token features: a pointwise projection
//! into the joint space followed by attention pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Session, Tensor, Var};
use crate::transformer::{aggregate, AggregatorWeights, Linear};

/// Contextualized token features of one caption, `S×d_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<S> {
    data: Tensor<S>,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn new(data: Tensor<S>) -> Result<Self> {
        data.dims2("token_sequence")?;
        if !data.is_finite() {
            return Err(Error::NonFinite { op: "token_sequence" });
        }
        Ok(TokenSequence { data })
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextWeights {
    pub projection: Linear,
    pub aggregator: AggregatorWeights,
}

impl TextWeights {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        token_dim: usize,
        joint_dim: usize,
    ) -> Result<Self> {
        Ok(TextWeights {
            projection: Linear::register(store, rng, &format!("{prefix}.projection"), token_dim, joint_dim, true)?,
            aggregator: AggregatorWeights::register(store, rng, &format!("{prefix}.pool"), joint_dim)?,
        })
    }
}

/// Text embedding F_t (`1×d_*`).
pub fn text_embed<S: Scalar>(
    sess: &mut Session<'_, S>,
    tokens: &TokenSequence<S>,
    weights: &TextWeights,
) -> Result<Var> {
    let raw = sess.tape.constant(tokens.tensor().clone())?;
    let projected = weights.projection.apply(sess, raw)?;
    aggregate(sess, projected, &weights.aggregator)
}
