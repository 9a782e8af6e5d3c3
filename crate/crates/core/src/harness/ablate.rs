use std::fmt;

use super::config::TrainConfig;
use super::dataset::Dataset;
use super::eval::evaluate_model;
use super::train::train;
use crate::error::Result;
use crate::model::{BiCNet, Dims};
use crate::numerics::{Scalar, Session, Tensor};
use crate::par::map_slice;
use crate::relation::{relation_forward, RegionSequence, SrtVariant};
use crate::retrieval::BidirectionalMetrics;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: SrtVariant,
    pub metrics: BidirectionalMetrics,
    pub final_loss: f64,
}

/// One row per SRT variant, laid out like a variant-comparison table:
/// text-to-video R@1/R@5/R@10/MedR, then video-to-text.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: [&str; 9] = [
    "Method", "t2v R@1", "t2v R@5", "t2v R@10", "t2v MedR", "v2t R@1", "v2t R@5", "v2t R@10", "v2t MedR",
];

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} | {:^31} | {:^31}", "", "Text-to-Video", "Video-to-Text")?;
        write!(f, "{:<18}", ABLATION_HEADER[0])?;
        for (i, h) in ABLATION_HEADER[1..].iter().enumerate() {
            let label = h.split(' ').nth(1).unwrap_or(h);
            if i % 4 == 0 {
                write!(f, " |")?;
            }
            write!(f, " {label:>6}")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<18}", row.variant.name())?;
            for m in [&row.metrics.text_to_video, &row.metrics.video_to_text] {
                write!(f, " |")?;
                for k in [1, 5, 10] {
                    write!(f, " {:>6.1}", 100.0 * m.recall(k))?;
                }
                write!(f, " {:>6}", m.med_r)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Trains every variant from the same seed on `train_data` and evaluates
/// each on `eval_data`.
pub fn ablate<S: Scalar>(base: &TrainConfig, train_data: &Dataset, eval_data: &Dataset) -> Result<AblationTable> {
    let rows = map_slice(base.parallelism(), &SrtVariant::ALL, |&variant| {
        let cfg = TrainConfig {
            variant,
            ..base.clone()
        };
        let outcome = train::<S>(&cfg, train_data)?;
        let model = outcome.checkpoint.model()?;
        let metrics = evaluate_model(
            &model,
            &outcome.checkpoint.params,
            eval_data,
            cfg.fusion(),
            cfg.parallelism(),
        )?;
        Ok(AblationRow {
            variant,
            metrics,
            final_loss: outcome.final_epoch_loss().unwrap_or(f64::NAN),
        })
    });
    Ok(AblationTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Norms observed for one variant under the zero-weight probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub variant: SrtVariant,
    /// ‖per-frame proposal means of the projected input‖
    pub frame_mean_norm: f64,
    /// ‖features entering relation-branch aggregation‖
    pub pre_aggregation_norm: f64,
}

impl ProbeRow {
    pub fn factor(&self) -> f64 {
        self.pre_aggregation_norm / self.frame_mean_norm
    }
}

/// Expected probe factor: each active per-layer residual doubles the
/// signal, and the outer residual adds the pooled features once more.
pub fn expected_probe_factor(variant: SrtVariant, layers: usize) -> f64 {
    let per_stack = 2f64.powi(layers as i32);
    let spatial = if variant.spatial_residual() { per_stack } else { 1.0 };
    let temporal = if variant.temporal_residual() { per_stack } else { 1.0 };
    let outer = if variant.outer_residual() { 1.0 } else { 0.0 };
    spatial * (temporal + outer)
}

fn frobenius<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Zero-weight probe: sublayer output projections and pooling queries are
/// zeroed, positional tables disabled, and the relation branch run on
/// `regions` for every variant.
pub fn zero_probe<S: Scalar>(cfg: &TrainConfig, dims: Dims, regions: &RegionSequence<S>) -> Result<Vec<ProbeRow>> {
    let probe_cfg = TrainConfig {
        frame_positional: false,
        proposal_positional: false,
        ..cfg.clone()
    };
    let (model, mut store) = BiCNet::build::<S>(probe_cfg.model_spec(dims), cfg.variant, cfg.seed)?;
    model.zero_sublayer_outputs(&mut store);
    model.zero_aggregator_queries(&mut store);
    SrtVariant::ALL
        .iter()
        .map(|&variant| {
            let mut sess = Session::new(&store);
            let mut means = Vec::with_capacity(regions.frames());
            for t in 0..regions.frames() {
                let raw = sess.tape.constant(regions.frame(t))?;
                let projected = model.relation.input.apply(&mut sess, raw)?;
                means.push(sess.tape.mean_rows(projected)?);
            }
            let frame_means = sess.tape.concat_rows(&means)?;
            let nodes = relation_forward(&mut sess, regions, &model.relation, variant)?;
            Ok(ProbeRow {
                variant,
                frame_mean_norm: frobenius(sess.value(frame_means)),
                pre_aggregation_norm: frobenius(sess.value(nodes.pre_aggregation)),
            })
        })
        .collect()
}
