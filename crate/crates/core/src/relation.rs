//! Relation branch: a spatial transformer over each frame's region
//! proposals, mean pooling, a temporal transformer over frames, the extra
//! residual paths that distinguish the SRT variants, and attention pooling
//! into the relation embedding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Session, Tensor, Var};
use crate::transformer::{
    aggregate, positional_add, register_stack, t_block, AggregatorWeights, BlockConfig, BlockWeights, Linear,
    PositionalTable,
};

/// Which extra residual connections are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SrtVariant {
    NonSRT,
    SpatialSRT,
    TemporalSRT,
    SpatioTemporalSRT,
    FullSRT,
}

impl SrtVariant {
    pub const ALL: [SrtVariant; 5] = [
        SrtVariant::NonSRT,
        SrtVariant::SpatialSRT,
        SrtVariant::TemporalSRT,
        SrtVariant::SpatioTemporalSRT,
        SrtVariant::FullSRT,
    ];

    /// Per-layer skip from each spatial layer's input to its output.
    pub fn spatial_residual(self) -> bool {
        matches!(
            self,
            SrtVariant::SpatialSRT | SrtVariant::SpatioTemporalSRT | SrtVariant::FullSRT
        )
    }

    /// Per-layer skip from each temporal layer's input to its output.
    pub fn temporal_residual(self) -> bool {
        matches!(
            self,
            SrtVariant::TemporalSRT | SrtVariant::SpatioTemporalSRT | SrtVariant::FullSRT
        )
    }

    /// Skip from the pooled frame features around the whole temporal stack.
    pub fn outer_residual(self) -> bool {
        self == SrtVariant::FullSRT
    }

    pub fn name(self) -> &'static str {
        match self {
            SrtVariant::NonSRT => "NonSRT",
            SrtVariant::SpatialSRT => "SpatialSRT",
            SrtVariant::TemporalSRT => "TemporalSRT",
            SrtVariant::SpatioTemporalSRT => "SpatioTemporalSRT",
            SrtVariant::FullSRT => "FullSRT",
        }
    }
}

impl fmt::Display for SrtVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SrtVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SrtVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown SRT variant {s:?}")))
    }
}

/// Region-proposal features of one clip, `T×N×d_r`. Frames with fewer than
/// N detections are zero-padded at the end; `counts` holds the number of
/// real proposals per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSequence<S> {
    data: Tensor<S>,
    counts: Vec<usize>,
}

impl<S: Scalar> RegionSequence<S> {
    /// Wraps a `T×N×d_r` tensor, treating trailing all-zero rows of each
    /// frame as padding. A frame keeps at least one row.
    pub fn new(data: Tensor<S>) -> Result<Self> {
        let &[frames, proposals, dim] = data.shape() else {
            return Err(Error::dim(
                "region_sequence",
                format!("expected T×N×d_r, got {:?}", data.shape()),
            ));
        };
        let mut counts = Vec::with_capacity(frames);
        for t in 0..frames {
            let frame = &data.data()[t * proposals * dim..(t + 1) * proposals * dim];
            let real = frame
                .chunks(dim)
                .rposition(|row| row.iter().any(|&v| v != S::zero()))
                .map_or(1, |last| last + 1);
            counts.push(real);
        }
        Self::with_counts(data, counts)
    }

    pub fn with_counts(data: Tensor<S>, counts: Vec<usize>) -> Result<Self> {
        let &[frames, proposals, _] = data.shape() else {
            return Err(Error::dim(
                "region_sequence",
                format!("expected T×N×d_r, got {:?}", data.shape()),
            ));
        };
        if counts.len() != frames || counts.iter().any(|&c| c == 0 || c > proposals) {
            return Err(Error::dim(
                "region_sequence",
                format!("per-frame proposal counts {counts:?} invalid for {frames}×{proposals}"),
            ));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite { op: "region_sequence" });
        }
        Ok(RegionSequence { data, counts })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn proposals(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn region_dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    /// Real proposals of frame `t` as a `count×d_r` matrix.
    pub fn frame(&self, t: usize) -> Tensor<S> {
        let (n, d) = (self.proposals(), self.region_dim());
        let start = t * n * d;
        let rows = self.counts[t];
        Tensor::from_parts(vec![rows, d], self.data.data()[start..start + rows * d].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrtWeights {
    pub input: Linear,
    pub spatial: Vec<BlockWeights>,
    pub temporal: Vec<BlockWeights>,
    pub proposal_positions: PositionalTable,
    pub frame_positions: PositionalTable,
    pub aggregator: AggregatorWeights,
}

/// Shape knobs for building relation-branch weights.
#[derive(Debug, Clone, Copy)]
pub struct SrtShape {
    pub region_dim: usize,
    pub block: BlockConfig,
    pub max_frames: usize,
    pub max_proposals: usize,
    pub frame_positional: bool,
    pub proposal_positional: bool,
}

impl SrtWeights {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        prefix: &str,
        shape: SrtShape,
    ) -> Result<Self> {
        let d = shape.block.model_dim;
        Ok(SrtWeights {
            input: Linear::register(store, rng, &format!("{prefix}.input"), shape.region_dim, d, true)?,
            spatial: register_stack(store, rng, &format!("{prefix}.spatial"), shape.block)?,
            temporal: register_stack(store, rng, &format!("{prefix}.temporal"), shape.block)?,
            proposal_positions: PositionalTable::register(
                store,
                rng,
                &format!("{prefix}.proposal_positions"),
                shape.max_proposals,
                d,
                shape.proposal_positional,
            )?,
            frame_positions: PositionalTable::register(
                store,
                rng,
                &format!("{prefix}.frame_positions"),
                shape.max_frames,
                d,
                shape.frame_positional,
            )?,
            aggregator: AggregatorWeights::register(store, rng, &format!("{prefix}.pool"), d)?,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.aggregator.dim
    }

    /// Zeroes every sublayer output projection in both stacks.
    pub fn zero_sublayer_outputs<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for block in self.spatial.iter().chain(&self.temporal) {
            block.zero_sublayer_outputs(store);
        }
    }
}

fn residual_stack<S: Scalar>(
    sess: &mut Session<'_, S>,
    mut x: Var,
    blocks: &[BlockWeights],
    extra_residual: bool,
) -> Result<Var> {
    for (l, block) in blocks.iter().enumerate() {
        sess.push_scope(format!("layer{l}"));
        let out = t_block(sess, x, block);
        sess.pop_scope();
        let out = out?;
        x = if extra_residual { sess.tape.add(out, x)? } else { out };
    }
    Ok(x)
}

/// Spatial transformer over one frame's projected proposals (`N×d`).
pub fn spatial_stage<S: Scalar>(
    sess: &mut Session<'_, S>,
    frame: Var,
    weights: &SrtWeights,
    variant: SrtVariant,
) -> Result<Var> {
    let (n, _) = sess.value(frame).dims2("spatial_stage")?;
    if n == 0 {
        return Err(Error::dim("spatial_stage", "frame has no proposals"));
    }
    let x = positional_add(sess, frame, &weights.proposal_positions)?;
    residual_stack(sess, x, &weights.spatial, variant.spatial_residual())
}

/// Mean over the proposal axis of each frame, stacked into `T×d`.
pub fn pool_proposals<S: Scalar>(sess: &mut Session<'_, S>, frames: &[Var]) -> Result<Var> {
    let means = frames
        .iter()
        .map(|&f| sess.tape.mean_rows(f))
        .collect::<Result<Vec<_>>>()?;
    sess.tape.concat_rows(&means)
}

/// Temporal transformer over pooled frame features (`T×d`).
pub fn temporal_stage<S: Scalar>(
    sess: &mut Session<'_, S>,
    frames: Var,
    weights: &SrtWeights,
    variant: SrtVariant,
) -> Result<Var> {
    let (t, _) = sess.value(frames).dims2("temporal_stage")?;
    if t == 0 {
        return Err(Error::dim("temporal_stage", "no frames"));
    }
    let x = positional_add(sess, frames, &weights.frame_positions)?;
    residual_stack(sess, x, &weights.temporal, variant.temporal_residual())
}

/// Intermediate nodes of one relation-branch pass.
#[derive(Debug, Clone, Copy)]
pub struct RelationNodes {
    /// Pooled per-frame features entering the temporal stage (`T×d`).
    pub pooled: Var,
    /// Features handed to the aggregation layer (`T×d`).
    pub pre_aggregation: Var,
    /// The relation embedding (`1×d`).
    pub embedding: Var,
}

pub fn relation_forward<S: Scalar>(
    sess: &mut Session<'_, S>,
    regions: &RegionSequence<S>,
    weights: &SrtWeights,
    variant: SrtVariant,
) -> Result<RelationNodes> {
    if regions.region_dim() != weights.input.in_dim {
        return Err(Error::Config(format!(
            "relation branch expects {}-dim regions, got {}",
            weights.input.in_dim,
            regions.region_dim()
        )));
    }
    let mut frame_outputs = Vec::with_capacity(regions.frames());
    for t in 0..regions.frames() {
        let raw = sess.tape.constant(regions.frame(t))?;
        let projected = weights.input.apply(sess, raw)?;
        sess.push_scope(format!("spatial.frame{t}"));
        let out = spatial_stage(sess, projected, weights, variant);
        sess.pop_scope();
        frame_outputs.push(out?);
    }
    let pooled = pool_proposals(sess, &frame_outputs)?;
    sess.push_scope("temporal");
    let temporal = temporal_stage(sess, pooled, weights, variant);
    sess.pop_scope();
    let temporal = temporal?;
    let pre_aggregation = if variant.outer_residual() {
        sess.tape.add(temporal, pooled)?
    } else {
        temporal
    };
    let embedding = aggregate(sess, pre_aggregation, &weights.aggregator)?;
    Ok(RelationNodes {
        pooled,
        pre_aggregation,
        embedding,
    })
}

/// Relation embedding F_r (`1×d`).
pub fn relation_embed<S: Scalar>(
    sess: &mut Session<'_, S>,
    regions: &RegionSequence<S>,
    weights: &SrtWeights,
    variant: SrtVariant,
) -> Result<Var> {
    relation_forward(sess, regions, weights, variant).map(|n| n.embedding)
}
