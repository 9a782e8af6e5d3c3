use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::{Dataset, TypedDataset};
use crate::error::{Error, Result};
use crate::model::{BiCNet, PairRef};
use crate::numerics::{adam_step, AdamState, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Whether this step finished its epoch.
    pub epoch_end: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub trace: Vec<StepRecord>,
}

impl<S> TrainOutcome<S> {
    /// Mean loss over the steps of the last completed epoch.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        let last = self.trace.last()?.epoch;
        let losses: Vec<f64> = self.trace.iter().filter(|r| r.epoch == last).map(|r| r.loss).collect();
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Epoch order: videos shuffled with the run seed, chunked into batches
/// of distinct videos, one randomly chosen caption per video. A trailing
/// batch with fewer than two videos is dropped.
pub(crate) fn epoch_batches(
    rng: &mut ChaCha8Rng,
    data: &TypedDataset<impl Scalar>,
    batch_size: usize,
) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..data.videos.len())
        .filter(|&v| !data.videos[v].captions.is_empty())
        .collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|chunk| chunk.len() >= 2)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&v| (v, rng.gen_range(0..data.videos[v].captions.len())))
                .collect()
        })
        .collect()
}

pub(crate) fn batch_refs<'a, S: Scalar>(data: &'a TypedDataset<S>, batch: &[(usize, usize)]) -> Vec<PairRef<'a, S>> {
    batch
        .iter()
        .map(|&(v, c)| {
            let video = &data.videos[v];
            PairRef {
                regions: &video.regions,
                frames: &video.frames,
                tokens: &video.captions[c],
            }
        })
        .collect()
}

/// Trains a freshly initialized model on every video of `data`.
pub fn train<S: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome<S>> {
    let (model, store) = BiCNet::build::<S>(cfg.model_spec(data.dims), cfg.variant, cfg.seed)?;
    train_from(cfg, data, model, store, |_, _| ControlFlow::Continue(()))
}

/// Trains starting from the given parameters. `on_step` sees every step
/// record together with the updated parameters and may stop the run.
pub fn train_from<S: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    model: BiCNet,
    mut store: ParamStore<S>,
    mut on_step: impl FnMut(&StepRecord, &ParamStore<S>) -> ControlFlow<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if cfg.scalar_kind != S::KIND {
        return Err(Error::Config(format!(
            "config selects {} but the run computes in {}",
            cfg.scalar_kind,
            S::KIND
        )));
    }
    let captioned = data.videos.iter().filter(|v| !v.captions.is_empty()).count();
    if cfg.batch_size > captioned {
        return Err(Error::Usage(format!(
            "batch size {} exceeds the {captioned} captioned videos in the dataset",
            cfg.batch_size
        )));
    }
    let typed = data.cast::<S>()?;
    let mode = cfg.parallelism();
    let fusion = cfg.fusion();
    let loss_cfg = cfg.loss();
    let mut adam = AdamState::new(&store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trace = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&mut rng, &typed, cfg.batch_size);
        let last = batches.len().saturating_sub(1);
        for (b, batch) in batches.iter().enumerate() {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            step += 1;
            let refs = batch_refs(&typed, batch);
            let (loss, grads) = model
                .batch_loss_and_grads(&store, &refs, fusion, loss_cfg, mode)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { step, value: f64::NAN },
                    other => other,
                })?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { step, value: loss });
            }
            store.zero_grads();
            store.accumulate(&grads);
            adam_step(&mut store, &mut adam)?;
            let record = StepRecord {
                step,
                epoch,
                loss,
                epoch_end: b == last,
            };
            trace.push(record);
            if on_step(&record, &store).is_break() {
                break 'epochs;
            }
        }
    }
    store.zero_grads();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            dims: data.dims,
            step: step as u64,
            params: store,
            adam,
        },
        trace,
    })
}
