//! Joint-space scoring, the hinge triplet objective and ranking metrics.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{kernels, Scalar, Tensor};

/// Weight λ of the relation-space cosine in the fused score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    lambda: f64,
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        Ok(FusionConfig { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    margin: f64,
    pub hardest_negative: bool,
}

impl LossConfig {
    pub fn new(margin: f64, hardest_negative: bool) -> Result<Self> {
        if !(margin > 0.0 && margin <= 1.0) {
            return Err(Error::Config(format!("margin must lie in (0, 1], got {margin}")));
        }
        Ok(LossConfig {
            margin,
            hardest_negative,
        })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// `λ·cos(F_r, F_t) + (1−λ)·cos(F_v, F_t)`
pub fn similarity<S: Scalar>(relation: &[S], video: &[S], text: &[S], cfg: FusionConfig) -> Result<S> {
    let cr = kernels::cosine(relation, text)?;
    let cv = kernels::cosine(video, text)?;
    Ok(fuse(cr, cv, cfg))
}

fn fuse<S: Scalar>(relation_cos: S, video_cos: S, cfg: FusionConfig) -> S {
    let lambda = S::lit(cfg.lambda);
    lambda * relation_cos + (S::one() - lambda) * video_cos
}

/// Elementwise fusion of two cosine matrices of the same shape.
pub fn fuse_scores<S: Scalar>(relation: &Tensor<S>, video: &Tensor<S>, cfg: FusionConfig) -> Result<Tensor<S>> {
    if relation.shape() != video.shape() {
        return Err(Error::dim(
            "fuse_scores",
            format!("{:?} vs {:?}", relation.shape(), video.shape()),
        ));
    }
    Ok(relation.zip_map(video, |r, v| fuse(r, v, cfg)))
}

fn square_batch<S: Scalar>(scores: &Tensor<S>) -> Result<usize> {
    let (r, c) = scores.dims2("triplet_loss")?;
    if r != c {
        return Err(Error::Usage(format!(
            "triplet loss needs a square batch score matrix, got {r}×{c}"
        )));
    }
    if r < 2 {
        return Err(Error::Usage("triplet loss needs at least two pairs per batch".into()));
    }
    Ok(r)
}

/// Hinge terms `[δ − S_ii + S_ij]₊` (wrong caption for video i) and
/// `[δ − S_ii + S_ji]₊` (wrong video for caption i), where `S[i][j]` scores
/// video i against caption j.
fn hinge_terms<S: Scalar>(scores: &Tensor<S>, margin: S, i: usize, j: usize) -> (S, S) {
    let pos = scores.get2(i, i);
    let caption_term = margin - pos + scores.get2(i, j);
    let video_term = margin - pos + scores.get2(j, i);
    (caption_term, video_term)
}

fn hardest_index<S: Scalar>(b: usize, i: usize, term: impl Fn(usize) -> S) -> usize {
    let mut best = if i == 0 { 1 } else { 0 };
    for j in 0..b {
        if j != i && term(j) > term(best) {
            best = j;
        }
    }
    best
}

/// Mean over ordered pairs `i≠j` of both hinge terms, or with
/// `hardest = true` the mean over `i` of the largest term per direction.
pub fn triplet_loss_value<S: Scalar>(scores: &Tensor<S>, margin: S, hardest: bool) -> Result<S> {
    let b = square_batch(scores)?;
    let mut total = S::zero();
    if hardest {
        for i in 0..b {
            let jc = hardest_index(b, i, |j| hinge_terms(scores, margin, i, j).0);
            let jv = hardest_index(b, i, |j| hinge_terms(scores, margin, i, j).1);
            total = total
                + hinge_terms(scores, margin, i, jc).0.max(S::zero())
                + hinge_terms(scores, margin, i, jv).1.max(S::zero());
        }
        Ok(total / S::lit(b as f64))
    } else {
        for i in 0..b {
            for j in (0..b).filter(|&j| j != i) {
                let (c, v) = hinge_terms(scores, margin, i, j);
                total = total + c.max(S::zero()) + v.max(S::zero());
            }
        }
        Ok(total / S::lit((b * (b - 1)) as f64))
    }
}

/// Gradient of [`triplet_loss_value`] with respect to the score matrix.
pub fn triplet_loss_grad<S: Scalar>(scores: &Tensor<S>, margin: S, hardest: bool) -> Result<Tensor<S>> {
    let b = square_batch(scores)?;
    let mut g = vec![S::zero(); b * b];
    let mut bump = |i: usize, j: usize, w: S| {
        g[i * b + j] = g[i * b + j] + w;
    };
    if hardest {
        let w = S::one() / S::lit(b as f64);
        for i in 0..b {
            let jc = hardest_index(b, i, |j| hinge_terms(scores, margin, i, j).0);
            if hinge_terms(scores, margin, i, jc).0 > S::zero() {
                bump(i, i, -w);
                bump(i, jc, w);
            }
            let jv = hardest_index(b, i, |j| hinge_terms(scores, margin, i, j).1);
            if hinge_terms(scores, margin, i, jv).1 > S::zero() {
                bump(i, i, -w);
                bump(jv, i, w);
            }
        }
    } else {
        let w = S::one() / S::lit((b * (b - 1)) as f64);
        for i in 0..b {
            for j in (0..b).filter(|&j| j != i) {
                let (c, v) = hinge_terms(scores, margin, i, j);
                if c > S::zero() {
                    bump(i, i, -w);
                    bump(i, j, w);
                }
                if v > S::zero() {
                    bump(i, i, -w);
                    bump(j, i, w);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, b], g))
}

/// Query×item scores with one true item per query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<S> {
    scores: Tensor<S>,
    ground_truth: Vec<usize>,
}

impl<S: Scalar> ScoreMatrix<S> {
    pub fn new(scores: Tensor<S>, ground_truth: Vec<usize>) -> Result<Self> {
        let (q, v) = scores.dims2("score_matrix")?;
        if ground_truth.len() != q {
            return Err(Error::dim(
                "score_matrix",
                format!("{q} queries but {} ground-truth indices", ground_truth.len()),
            ));
        }
        if let Some(&bad) = ground_truth.iter().find(|&&g| g >= v) {
            return Err(Error::dim(
                "score_matrix",
                format!("ground-truth index {bad} out of {v} items"),
            ));
        }
        if !scores.is_finite() {
            return Err(Error::NonFinite { op: "score_matrix" });
        }
        Ok(ScoreMatrix { scores, ground_truth })
    }

    /// Square matrix whose diagonal holds the true pairs.
    pub fn diagonal(scores: Tensor<S>) -> Result<Self> {
        let q = scores.dims2("score_matrix")?.0;
        Self::new(scores, (0..q).collect())
    }

    pub fn queries(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn items(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn scores(&self) -> &Tensor<S> {
        &self.scores
    }

    pub fn ground_truth(&self) -> &[usize] {
        &self.ground_truth
    }
}

/// 1-based rank of the true item for every query. Ties go to the lower
/// item index.
pub fn rank_of_truth<S: Scalar>(m: &ScoreMatrix<S>) -> Vec<usize> {
    (0..m.queries())
        .map(|q| {
            let row = m.scores.row(q);
            let gt = m.ground_truth[q];
            let target = row[gt];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < gt))
                .count();
            ahead + 1
        })
        .collect()
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Usage(format!("recall cutoff must be >= 1, got {k}")));
    }
    if ranks.is_empty() {
        return Err(Error::Usage("recall over zero queries".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Lower median: the element at 1-based position ⌈n/2⌉ of the sorted ranks.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    if ranks.is_empty() {
        return Err(Error::Usage("median rank over zero queries".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(sorted[ranks.len().div_ceil(2) - 1])
}

pub const REPORTED_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub r_at: BTreeMap<usize, f64>,
    pub med_r: usize,
}

impl RetrievalMetrics {
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Result<Self> {
        let mut r_at = BTreeMap::new();
        for &k in cutoffs {
            r_at.insert(k, recall_at_k(ranks, k)?);
        }
        Ok(RetrievalMetrics {
            r_at,
            med_r: median_rank(ranks)?,
        })
    }

    pub fn from_scores<S: Scalar>(m: &ScoreMatrix<S>) -> Result<Self> {
        Self::from_ranks(&rank_of_truth(m), &REPORTED_CUTOFFS)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Text-to-video and video-to-text metrics for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BidirectionalMetrics {
    pub text_to_video: RetrievalMetrics,
    pub video_to_text: RetrievalMetrics,
}

impl BidirectionalMetrics {
    /// `(key, value)` records with stable names such as `t2v.r1`, `v2t.medr`.
    pub fn records(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (dir, m) in [("t2v", &self.text_to_video), ("v2t", &self.video_to_text)] {
            for (k, v) in &m.r_at {
                out.push((format!("{dir}.r{k}"), *v));
            }
            out.push((format!("{dir}.medr"), m.med_r as f64));
        }
        out
    }
}

impl fmt::Display for BidirectionalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, value) in self.records() {
            if key.ends_with("medr") {
                writeln!(f, "{key}={value}")?;
            } else {
                writeln!(f, "{key}={value:.6}")?;
            }
        }
        Ok(())
    }
}
