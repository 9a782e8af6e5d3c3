//! Central finite-difference verification of every parameter gradient of
//! the full model loss.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::global::video_embed;
use crate::global::FrameFeatures;
use crate::model::{loss_from_embeddings, BiCNet, Dims, ModelSpec, PairEmbeddings, PairRef};
use crate::numerics::Tensor;
use crate::numerics::{ParamStore, Session};
use crate::par::Parallelism;
use crate::relation::relation_embed;
use crate::relation::{RegionSequence, SrtVariant};
use crate::retrieval::{FusionConfig, LossConfig};
use crate::text::text_embed;
use crate::text::TokenSequence;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub dims: Dims,
    pub joint_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub batch: usize,
    pub tokens: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub variants: Vec<SrtVariant>,
    /// Fault injection: perturbs the analytic gradient of this group.
    pub corrupt_group: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            dims: Dims {
                frames: 3,
                proposals: 4,
                region_dim: 6,
                appearance_dim: 4,
                motion_dim: 3,
                token_dim: 5,
            },
            joint_dim: 8,
            heads: 2,
            layers: 2,
            batch: 4,
            tokens: 3,
            seed: 7,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            variants: SrtVariant::ALL.to_vec(),
            corrupt_group: None,
        }
    }
}

/// Parameter group of a dotted parameter name: the owning module path,
/// with per-head segments folded together.
pub fn parameter_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    parts[..parts.len().saturating_sub(1)]
        .iter()
        .filter(|p| !(p.starts_with("head") && p[4..].chars().all(|c| c.is_ascii_digit()) && p.len() > 4))
        .copied()
        .collect::<Vec<_>>()
        .join(".")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub scalars: usize,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: SrtVariant,
    pub groups: Vec<GroupResult>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub variants: Vec<VariantResult>,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<(SrtVariant, &GroupResult)> {
        self.variants
            .iter()
            .flat_map(|v| v.groups.iter().map(move |g| (v.variant, g)))
            // NaN errors count as failures.
            .filter(|(_, g)| g.max_rel_error.partial_cmp(&self.tolerance) != Some(std::cmp::Ordering::Less))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.variants
            .iter()
            .flat_map(|v| &v.groups)
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.variants {
            for g in &v.groups {
                let status = if g.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
                writeln!(
                    f,
                    "{:<18} {:<40} {:>6} {:>12.3e} {status}",
                    v.variant.name(),
                    g.group,
                    g.scalars,
                    g.max_rel_error
                )?;
            }
        }
        writeln!(
            f,
            "max relative error {:.3e} (tolerance {:.0e}) in {:.2}s",
            self.max_error(),
            self.tolerance,
            self.elapsed.as_secs_f64()
        )
    }
}

struct Batch {
    regions: Vec<RegionSequence<f64>>,
    frames: Vec<FrameFeatures<f64>>,
    tokens: Vec<TokenSequence<f64>>,
}

fn random_batch(cfg: &GradCheckConfig) -> Result<Batch> {
    let d = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let mut batch = Batch {
        regions: Vec::new(),
        frames: Vec::new(),
        tokens: Vec::new(),
    };
    for _ in 0..cfg.batch {
        batch
            .regions
            .push(RegionSequence::new(draw(&[d.frames, d.proposals, d.region_dim]))?);
        batch.frames.push(FrameFeatures::new(
            draw(&[d.frames, d.frame_dim()]),
            d.appearance_dim,
            d.motion_dim,
        )?);
        batch.tokens.push(TokenSequence::new(draw(&[cfg.tokens, d.token_dim]))?);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Relation,
    Global,
    Text,
}

impl Branch {
    fn of(name: &str) -> Branch {
        match name.split('.').next() {
            Some("relation") => Branch::Relation,
            Some("global") => Branch::Global,
            _ => Branch::Text,
        }
    }
}

/// Full batch loss after perturbing a parameter of `branch`. Embeddings of
/// the other two branches cannot depend on that parameter, so they are
/// reused from `base`.
fn perturbed_loss(
    model: &BiCNet,
    store: &ParamStore<f64>,
    refs: &[PairRef<'_, f64>],
    base: &[PairEmbeddings<f64>],
    branch: Branch,
    fusion: FusionConfig,
    loss: LossConfig,
) -> Result<f64> {
    let mut embeddings = base.to_vec();
    for (pair, emb) in refs.iter().zip(&mut embeddings) {
        let mut sess = Session::new(store);
        let (var, slot) = match branch {
            Branch::Relation => (
                relation_embed(&mut sess, pair.regions, &model.relation, model.variant)?,
                &mut emb.relation,
            ),
            Branch::Global => (video_embed(&mut sess, pair.frames, &model.global)?, &mut emb.video),
            Branch::Text => (text_embed(&mut sess, pair.tokens, &model.text)?, &mut emb.text),
        };
        *slot = sess.value(var).clone();
    }
    loss_from_embeddings(&embeddings, fusion, loss)
}

/// Runs the check for every configured variant, in 64-bit arithmetic.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let batch = random_batch(cfg)?;
    let refs: Vec<PairRef<'_, f64>> = (0..cfg.batch)
        .map(|i| PairRef {
            regions: &batch.regions[i],
            frames: &batch.frames[i],
            tokens: &batch.tokens[i],
        })
        .collect();
    let spec = ModelSpec {
        dims: cfg.dims,
        joint_dim: cfg.joint_dim,
        heads: cfg.heads,
        mlp_dim: 4 * cfg.joint_dim,
        layers: cfg.layers,
        frame_positional: true,
        proposal_positional: true,
    };
    let fusion = FusionConfig::new(0.5)?;
    let loss = LossConfig::new(0.2, false)?;
    let mode = Parallelism::Sequential;
    let mut variants = Vec::new();
    for &variant in &cfg.variants {
        let (model, mut store) = BiCNet::build::<f64>(spec, variant, cfg.seed)?;
        let (_, grads) = model.batch_loss_and_grads(&store, &refs, fusion, loss, mode)?;
        store.accumulate(&grads);
        let base = model.embed_batch(&store, &refs, mode)?;
        let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name.clone();
            let group = parameter_group(&name);
            let branch = Branch::of(&name);
            let mut analytic = store.get(id).grad.clone().expect("accumulated");
            if cfg.corrupt_group.as_deref() == Some(group.as_str()) {
                analytic = analytic.map(|g| g * 1.5 + 1e-2);
            }
            let mut worst: f64 = 0.0;
            for k in 0..analytic.numel() {
                let original = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = original + cfg.step;
                let plus = perturbed_loss(&model, &store, &refs, &base, branch, fusion, loss)?;
                store.value_mut(id).data_mut()[k] = original - cfg.step;
                let minus = perturbed_loss(&model, &store, &refs, &base, branch, fusion, loss)?;
                store.value_mut(id).data_mut()[k] = original;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
                worst = worst.max(rel);
            }
            let entry = groups.entry(group.clone()).or_insert(GroupResult {
                group,
                max_rel_error: 0.0,
                scalars: 0,
            });
            entry.max_rel_error = entry.max_rel_error.max(worst);
            entry.scalars += analytic.numel();
        }
        variants.push(VariantResult {
            variant,
            groups: groups.into_values().collect(),
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        variants,
        elapsed: start.elapsed(),
    })
}
