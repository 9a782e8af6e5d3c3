//! The full bi-branch model: relation branch, global branch and text branch
//! sharing one parameter store, plus the batched loss/gradient pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::{video_embed, FrameFeatures, GlobalWeights};
use crate::numerics::{Gradients, ParamStore, Scalar, Session, Tape, Tensor, Var};
use crate::par::{map_slice, Parallelism};
use crate::relation::{relation_forward, RegionSequence, SrtShape, SrtVariant, SrtWeights};
use crate::retrieval::{FusionConfig, LossConfig};
use crate::text::{text_embed, TextWeights, TokenSequence};
use crate::transformer::BlockConfig;

/// Feature dimensions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub frames: usize,
    pub proposals: usize,
    pub region_dim: usize,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub token_dim: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            frames: 4,
            proposals: 5,
            region_dim: 40,
            appearance_dim: 32,
            motion_dim: 24,
            token_dim: 48,
        }
    }
}

impl Dims {
    pub fn frame_dim(&self) -> usize {
        self.appearance_dim + self.motion_dim
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.frames,
            self.proposals,
            self.region_dim,
            self.appearance_dim,
            self.motion_dim,
            self.token_dim,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "all feature dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub dims: Dims,
    pub joint_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub layers: usize,
    pub frame_positional: bool,
    pub proposal_positional: bool,
}

impl ModelSpec {
    pub fn block(&self) -> Result<BlockConfig> {
        BlockConfig::new(self.joint_dim, self.heads, self.mlp_dim, self.layers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiCNet {
    pub spec: ModelSpec,
    pub variant: SrtVariant,
    pub relation: SrtWeights,
    pub global: GlobalWeights,
    pub text: TextWeights,
}

/// One video and one of its captions.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a, S> {
    pub regions: &'a RegionSequence<S>,
    pub frames: &'a FrameFeatures<S>,
    pub tokens: &'a TokenSequence<S>,
}

/// Embeddings of one video (`relation`, `video`) and one caption (`text`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbeddings<S> {
    pub relation: Tensor<S>,
    pub video: Tensor<S>,
    pub text: Tensor<S>,
}

struct PairPass<'p, S> {
    sess: Session<'p, S>,
    relation: Var,
    video: Var,
    text: Var,
}

impl BiCNet {
    /// Registers every parameter with a seeded initializer. The parameter
    /// set and its initial values do not depend on `variant`.
    pub fn build<S: Scalar>(spec: ModelSpec, variant: SrtVariant, seed: u64) -> Result<(Self, ParamStore<S>)> {
        spec.dims.validate()?;
        let block = spec.block()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let relation = SrtWeights::register(
            &mut store,
            &mut rng,
            "relation",
            SrtShape {
                region_dim: spec.dims.region_dim,
                block,
                max_frames: spec.dims.frames,
                max_proposals: spec.dims.proposals,
                frame_positional: spec.frame_positional,
                proposal_positional: spec.proposal_positional,
            },
        )?;
        let global = GlobalWeights::register(
            &mut store,
            &mut rng,
            "global",
            spec.dims.frame_dim(),
            block,
            spec.dims.frames,
            spec.frame_positional,
        )?;
        let text = TextWeights::register(&mut store, &mut rng, "text", spec.dims.token_dim, spec.joint_dim)?;
        Ok((
            BiCNet {
                spec,
                variant,
                relation,
                global,
                text,
            },
            store,
        ))
    }

    pub fn with_variant(&self, variant: SrtVariant) -> Self {
        BiCNet {
            variant,
            ..self.clone()
        }
    }

    /// `(F_r, F_v)` for one clip, each `1×d_*`.
    pub fn embed_video<S: Scalar>(
        &self,
        sess: &mut Session<'_, S>,
        regions: &RegionSequence<S>,
        frames: &FrameFeatures<S>,
    ) -> Result<(Var, Var)> {
        sess.push_scope("relation");
        let relation = relation_forward(sess, regions, &self.relation, self.variant);
        sess.pop_scope();
        sess.push_scope("global");
        let video = video_embed(sess, frames, &self.global);
        sess.pop_scope();
        Ok((relation?.embedding, video?))
    }

    pub fn embed_text<S: Scalar>(&self, sess: &mut Session<'_, S>, tokens: &TokenSequence<S>) -> Result<Var> {
        sess.push_scope("text");
        let out = text_embed(sess, tokens, &self.text);
        sess.pop_scope();
        out
    }

    /// Embeds one clip without recording anything beyond the pass itself.
    pub fn video_embeddings<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        regions: &RegionSequence<S>,
        frames: &FrameFeatures<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut sess = Session::new(store);
        let (r, v) = self.embed_video(&mut sess, regions, frames)?;
        Ok((sess.value(r).clone(), sess.value(v).clone()))
    }

    pub fn text_embedding<S: Scalar>(&self, store: &ParamStore<S>, tokens: &TokenSequence<S>) -> Result<Tensor<S>> {
        let mut sess = Session::new(store);
        let t = self.embed_text(&mut sess, tokens)?;
        Ok(sess.value(t).clone())
    }

    /// Zeroes W^O, W_2 and b_2 in every transformer layer of both video
    /// branches.
    pub fn zero_sublayer_outputs<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.relation.zero_sublayer_outputs(store);
        self.global.zero_sublayer_outputs(store);
    }

    /// Zeroes the pooling queries, making every aggregation a plain mean.
    pub fn zero_aggregator_queries<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for agg in [self.relation.aggregator, self.global.aggregator, self.text.aggregator] {
            store.value_mut(agg.query).data_mut().fill(S::zero());
        }
    }

    fn pair_pass<'p, S: Scalar>(&self, store: &'p ParamStore<S>, pair: &PairRef<'_, S>) -> Result<PairPass<'p, S>> {
        let mut sess = Session::new(store);
        let (relation, video) = self.embed_video(&mut sess, pair.regions, pair.frames)?;
        let text = self.embed_text(&mut sess, pair.tokens)?;
        Ok(PairPass {
            sess,
            relation,
            video,
            text,
        })
    }

    /// Embeds every pair of a batch, one independent pass per pair.
    pub fn embed_batch<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        batch: &[PairRef<'_, S>],
        mode: Parallelism,
    ) -> Result<Vec<PairEmbeddings<S>>> {
        map_slice(mode, batch, |pair| {
            let pass = self.pair_pass(store, pair)?;
            Ok(PairEmbeddings {
                relation: pass.sess.value(pass.relation).clone(),
                video: pass.sess.value(pass.video).clone(),
                text: pass.sess.value(pass.text).clone(),
            })
        })
        .into_iter()
        .collect()
    }

    /// Batch triplet loss. Video i is paired with caption i.
    pub fn batch_loss<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        batch: &[PairRef<'_, S>],
        fusion: FusionConfig,
        loss: LossConfig,
        mode: Parallelism,
    ) -> Result<S> {
        let embeddings = self.embed_batch(store, batch, mode)?;
        loss_from_embeddings(&embeddings, fusion, loss)
    }

    /// Batch triplet loss and its gradient with respect to every parameter.
    ///
    /// Each pair is embedded on its own tape; the loss is built on a small
    /// tape over the stacked embeddings, and its embedding gradients seed
    /// the per-pair backward passes. Per-pair gradients are summed in batch
    /// order, so the result does not depend on `mode`.
    pub fn batch_loss_and_grads<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        batch: &[PairRef<'_, S>],
        fusion: FusionConfig,
        loss: LossConfig,
        mode: Parallelism,
    ) -> Result<(S, Gradients<S>)> {
        let passes: Vec<PairPass<'_, S>> = map_slice(mode, batch, |pair| self.pair_pass(store, pair))
            .into_iter()
            .collect::<Result<_>>()?;
        let embeddings: Vec<PairEmbeddings<S>> = passes
            .iter()
            .map(|p| PairEmbeddings {
                relation: p.sess.value(p.relation).clone(),
                video: p.sess.value(p.video).clone(),
                text: p.sess.value(p.text).clone(),
            })
            .collect();
        let mut tape = Tape::new();
        let (leaves, root) = loss_head(&mut tape, &embeddings, fusion, loss)?;
        let value = tape.value(root).data()[0];
        let upstream = tape.grads_wrt(root, &leaves)?;
        let per_pair: Vec<Result<Gradients<S>>> =
            map_slice(mode, &passes.iter().enumerate().collect::<Vec<_>>(), |(i, p)| {
                let row = |g: &Tensor<S>| Tensor::from_parts(vec![1, g.last_dim()], g.row(*i).to_vec());
                p.sess.tape.backward_seeded(&[
                    (p.relation, row(&upstream[0])),
                    (p.video, row(&upstream[1])),
                    (p.text, row(&upstream[2])),
                ])
            });
        let mut total = Gradients::default();
        for g in per_pair {
            total.merge(g?);
        }
        Ok((value, total))
    }
}

/// Batch triplet loss over already computed embeddings.
pub fn loss_from_embeddings<S: Scalar>(
    embeddings: &[PairEmbeddings<S>],
    fusion: FusionConfig,
    loss: LossConfig,
) -> Result<S> {
    let mut tape = Tape::new();
    let (_, root) = loss_head(&mut tape, embeddings, fusion, loss)?;
    Ok(tape.value(root).data()[0])
}

/// Stacks batch embeddings as leaves and records the fused score matrix
/// and triplet loss. Returns the `[relation, video, text]` leaves and the
/// loss node.
fn loss_head<S: Scalar>(
    tape: &mut Tape<S>,
    embeddings: &[PairEmbeddings<S>],
    fusion: FusionConfig,
    loss: LossConfig,
) -> Result<([Var; 3], Var)> {
    let stack = |pick: fn(&PairEmbeddings<S>) -> &Tensor<S>| -> Result<Tensor<S>> {
        let d = embeddings
            .first()
            .map(|e| pick(e).numel())
            .ok_or_else(|| Error::Usage("empty batch".into()))?;
        let data = embeddings.iter().flat_map(|e| pick(e).data().iter().copied()).collect();
        Tensor::new(vec![embeddings.len(), d], data)
    };
    let relation = tape.constant(stack(|e| &e.relation)?)?;
    let video = tape.constant(stack(|e| &e.video)?)?;
    let text = tape.constant(stack(|e| &e.text)?)?;
    let scores = fused_scores(tape, relation, video, text, fusion)?;
    let root = tape.triplet_loss(scores, S::lit(loss.margin()), loss.hardest_negative)?;
    Ok(([relation, video, text], root))
}

/// `λ·cos(F_r, F_t) + (1−λ)·cos(F_v, F_t)` for all video/caption rows.
pub fn fused_scores<S: Scalar>(
    tape: &mut Tape<S>,
    relation: Var,
    video: Var,
    text: Var,
    fusion: FusionConfig,
) -> Result<Var> {
    let lambda = S::lit(fusion.lambda());
    let cr = tape.cosine_matrix(relation, text)?;
    let cv = tape.cosine_matrix(video, text)?;
    let cr = tape.scale(cr, lambda)?;
    let cv = tape.scale(cv, S::one() - lambda)?;
    tape.add(cr, cv)
}
