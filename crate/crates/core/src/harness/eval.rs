use super::checkpoint::Checkpoint;
use super::dataset::{Dataset, TypedDataset};
use crate::error::{Error, Result};
use crate::model::BiCNet;
use crate::numerics::{kernels, ParamStore, Scalar, Tensor};
use crate::par::{map_range, map_slice, Parallelism};
use crate::retrieval::{BidirectionalMetrics, FusionConfig, RetrievalMetrics, ScoreMatrix};

/// Embeddings of every video and caption of an evaluation set.
#[derive(Debug, Clone)]
pub struct EmbeddedSet<S> {
    /// Relation embeddings, one row per video.
    pub relation: Vec<Tensor<S>>,
    /// Global video embeddings, one row per video.
    pub video: Vec<Tensor<S>>,
    /// Text embeddings, one row per caption.
    pub text: Vec<Tensor<S>>,
    /// Owning video of each caption.
    pub caption_owner: Vec<usize>,
    /// First caption of each video, when it has one.
    pub first_caption: Vec<Option<usize>>,
}

pub fn embed_dataset<S: Scalar>(
    model: &BiCNet,
    store: &ParamStore<S>,
    data: &TypedDataset<S>,
    mode: Parallelism,
) -> Result<EmbeddedSet<S>> {
    let videos: Vec<(Tensor<S>, Tensor<S>)> = map_slice(mode, &data.videos, |v| {
        model.video_embeddings(store, &v.regions, &v.frames)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut captions = Vec::new();
    let mut caption_owner = Vec::new();
    let mut first_caption = Vec::with_capacity(data.videos.len());
    for (vi, v) in data.videos.iter().enumerate() {
        first_caption.push((!v.captions.is_empty()).then_some(captions.len()));
        for c in &v.captions {
            captions.push(c);
            caption_owner.push(vi);
        }
    }
    let text = map_slice(mode, &captions, |tokens| model.text_embedding(store, tokens))
        .into_iter()
        .collect::<Result<_>>()?;
    let (relation, video) = videos.into_iter().unzip();
    Ok(EmbeddedSet {
        relation,
        video,
        text,
        caption_owner,
        first_caption,
    })
}

/// `scores[q][i] = λ·cos(text_q, relation_i) + (1−λ)·cos(text_q, video_i)`
fn fused_rows<S: Scalar>(
    texts: &[&Tensor<S>],
    relation: &[Tensor<S>],
    video: &[Tensor<S>],
    fusion: FusionConfig,
    mode: Parallelism,
) -> Result<Tensor<S>> {
    let lambda = S::lit(fusion.lambda());
    let rows: Vec<Result<Vec<S>>> = map_range(mode, texts.len(), |q| {
        relation
            .iter()
            .zip(video)
            .map(|(r, v)| {
                let cr = kernels::cosine(texts[q].data(), r.data())?;
                let cv = kernels::cosine(texts[q].data(), v.data())?;
                Ok(lambda * cr + (S::one() - lambda) * cv)
            })
            .collect()
    });
    let mut data = Vec::with_capacity(texts.len() * relation.len());
    for row in rows {
        data.extend(row?);
    }
    Tensor::new(vec![texts.len(), relation.len()], data)
}

/// Caption-by-video matrix for text→video retrieval.
pub fn text_to_video_scores<S: Scalar>(
    set: &EmbeddedSet<S>,
    fusion: FusionConfig,
    mode: Parallelism,
) -> Result<ScoreMatrix<S>> {
    if set.text.is_empty() || set.video.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let texts: Vec<&Tensor<S>> = set.text.iter().collect();
    let scores = fused_rows(&texts, &set.relation, &set.video, fusion, mode)?;
    ScoreMatrix::new(scores, set.caption_owner.clone())
}

/// Video-by-caption matrix for video→text retrieval, using each captioned
/// video's first caption as its match.
pub fn video_to_text_scores<S: Scalar>(
    set: &EmbeddedSet<S>,
    fusion: FusionConfig,
    mode: Parallelism,
) -> Result<ScoreMatrix<S>> {
    let pairs: Vec<(usize, usize)> = set
        .first_caption
        .iter()
        .enumerate()
        .filter_map(|(v, c)| c.map(|c| (v, c)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let texts: Vec<&Tensor<S>> = pairs.iter().map(|&(_, c)| &set.text[c]).collect();
    let relation: Vec<Tensor<S>> = pairs.iter().map(|&(v, _)| set.relation[v].clone()).collect();
    let video: Vec<Tensor<S>> = pairs.iter().map(|&(v, _)| set.video[v].clone()).collect();
    // Rows of this matrix are captions; transpose so rows are videos.
    let by_caption = fused_rows(&texts, &relation, &video, fusion, mode)?;
    ScoreMatrix::diagonal(kernels::transpose(&by_caption)?)
}

pub fn metrics_for<S: Scalar>(
    set: &EmbeddedSet<S>,
    fusion: FusionConfig,
    mode: Parallelism,
) -> Result<BidirectionalMetrics> {
    Ok(BidirectionalMetrics {
        text_to_video: RetrievalMetrics::from_scores(&text_to_video_scores(set, fusion, mode)?)?,
        video_to_text: RetrievalMetrics::from_scores(&video_to_text_scores(set, fusion, mode)?)?,
    })
}

/// Embeds `data` with the given parameters and reports both directions.
pub fn evaluate_model<S: Scalar>(
    model: &BiCNet,
    store: &ParamStore<S>,
    data: &Dataset,
    fusion: FusionConfig,
    mode: Parallelism,
) -> Result<BidirectionalMetrics> {
    if data.dims != model.spec.dims {
        return Err(Error::Config(format!(
            "model was built for dims {:?}, dataset has {:?}",
            model.spec.dims, data.dims
        )));
    }
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let typed = data.cast::<S>()?;
    let set = embed_dataset(model, store, &typed, mode)?;
    metrics_for(&set, fusion, mode)
}

/// Evaluates a checkpoint on `data`, optionally overriding λ.
pub fn evaluate<S: Scalar>(
    ckpt: &Checkpoint<S>,
    data: &Dataset,
    lambda: Option<f64>,
    mode: Parallelism,
) -> Result<BidirectionalMetrics> {
    if ckpt.dims != data.dims {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match dataset dims {:?}",
            ckpt.dims, data.dims
        )));
    }
    let fusion = FusionConfig::new(lambda.unwrap_or(ckpt.config.lambda))?;
    let model = ckpt.model()?;
    evaluate_model(&model, &ckpt.params, data, fusion, mode)
}
