//! Global branch: concatenated appearance/motion frame features fused by a
//! pointwise linear layer, encoded by a plain transformer stack, and pooled
//! into the video embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Session, Tensor, Var};
use crate::transformer::{
    aggregate, positional_add, register_stack, t_block, AggregatorWeights, BlockConfig, BlockWeights, Linear,
    PositionalTable,
};

/// Per-frame `[appearance ‖ motion]` features, `T×(d_a+d_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<S> {
    data: Tensor<S>,
    appearance_dim: usize,
    motion_dim: usize,
}

impl<S: Scalar> FrameFeatures<S> {
    pub fn new(data: Tensor<S>, appearance_dim: usize, motion_dim: usize) -> Result<Self> {
        let (_, width) = data.dims2("frame_features")?;
        if appearance_dim == 0 || motion_dim == 0 || width != appearance_dim + motion_dim {
            return Err(Error::dim(
                "frame_features",
                format!("rows are {width} wide, expected {appearance_dim}+{motion_dim}",),
            ));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite { op: "frame_features" });
        }
        Ok(FrameFeatures {
            data,
            appearance_dim,
            motion_dim,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.appearance_dim + self.motion_dim
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalWeights {
    pub fusion: Linear,
    pub blocks: Vec<BlockWeights>,
    pub positions: PositionalTable,
    pub aggregator: AggregatorWeights,
}

impl GlobalWeights {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        frame_dim: usize,
        block: BlockConfig,
        max_frames: usize,
        positional: bool,
    ) -> Result<Self> {
        let d = block.model_dim;
        Ok(GlobalWeights {
            fusion: Linear::register(store, rng, &format!("{prefix}.fusion"), frame_dim, d, true)?,
            blocks: register_stack(store, rng, &format!("{prefix}.blocks"), block)?,
            positions: PositionalTable::register(
                store,
                rng,
                &format!("{prefix}.frame_positions"),
                max_frames,
                d,
                positional,
            )?,
            aggregator: AggregatorWeights::register(store, rng, &format!("{prefix}.pool"), d)?,
        })
    }

    pub fn zero_sublayer_outputs<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for block in &self.blocks {
            block.zero_sublayer_outputs(store);
        }
    }
}

/// Row-wise fusion projection to `T×d_g`.
pub fn fuse_frames<S: Scalar>(
    sess: &mut Session<'_, S>,
    frames: &FrameFeatures<S>,
    weights: &GlobalWeights,
) -> Result<Var> {
    let raw = sess.tape.constant(frames.tensor().clone())?;
    weights.fusion.apply(sess, raw)
}

/// Video embedding F_v (`1×d_*`).
pub fn video_embed<S: Scalar>(
    sess: &mut Session<'_, S>,
    frames: &FrameFeatures<S>,
    weights: &GlobalWeights,
) -> Result<Var> {
    let fused = fuse_frames(sess, frames, weights)?;
    let mut x = positional_add(sess, fused, &weights.positions)?;
    for (l, block) in weights.blocks.iter().enumerate() {
        sess.push_scope(format!("layer{l}"));
        let out = t_block(sess, x, block);
        sess.pop_scope();
        x = out?;
    }
    aggregate(sess, x, &weights.aggregator)
}
