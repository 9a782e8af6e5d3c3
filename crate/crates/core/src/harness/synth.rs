//! Synthetic paired data: every pair draws a latent vector, and its region,
//! frame and token features are noisy images of that latent under fixed
//! random linear maps shared by the whole dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blob::write_blob;
use super::dataset::{CaptionEntry, DatasetManifest, ManifestItem};
use crate::error::{Error, Result};
use crate::model::Dims;
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Pairs tagged `train`.
    pub pairs: usize,
    /// Extra pairs tagged `test`, drawn from the same maps.
    pub test_pairs: usize,
    pub latent_dim: usize,
    pub noise_scale: f32,
    pub dims: Dims,
    pub seed: u64,
    pub captions_per_video: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            pairs: 32,
            test_pairs: 0,
            latent_dim: 16,
            noise_scale: 0.3,
            dims: Dims::default(),
            seed: 0,
            captions_per_video: 1,
            min_tokens: 4,
            max_tokens: 8,
        }
    }
}

/// Matrix `rows×latent` with entries of variance `1/latent`.
fn random_map(rng: &mut ChaCha8Rng, rows: usize, latent: usize) -> Vec<f32> {
    let bound = (3.0 / latent as f32).sqrt();
    (0..rows * latent).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn image(map: &[f32], latent: &[f32], noise: f32, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    for row in map.chunks(latent.len()) {
        let clean: f32 = row.iter().zip(latent).map(|(a, z)| a * z).sum();
        let jitter = if noise > 0.0 {
            noise * rng.gen_range(-1.0f32..1.0)
        } else {
            0.0
        };
        out.push(clean + jitter);
    }
}

/// Writes blobs and a manifest under `out_dir`; returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.dims.validate()?;
    if spec.latent_dim == 0 || spec.captions_per_video == 0 {
        return Err(Error::Config(
            "latent_dim and captions_per_video must be positive".into(),
        ));
    }
    if spec.min_tokens == 0 || spec.min_tokens > spec.max_tokens {
        return Err(Error::Config(format!(
            "token range {}..={} is empty",
            spec.min_tokens, spec.max_tokens
        )));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(Error::Config(format!("invalid noise scale {}", spec.noise_scale)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let dims = spec.dims;
    let latent = spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let region_map = random_map(&mut rng, dims.region_dim, latent);
    let frame_map = random_map(&mut rng, dims.frame_dim(), latent);
    let token_map = random_map(&mut rng, dims.token_dim, latent);

    let total = spec.pairs + spec.test_pairs;
    let mut items = Vec::with_capacity(total);
    for i in 0..total {
        let z: Vec<f32> = (0..latent).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let id = format!("video{i:05}");
        let split = if i < spec.pairs { "train" } else { "test" };

        let mut regions = Vec::with_capacity(dims.frames * dims.proposals * dims.region_dim);
        for _ in 0..dims.frames * dims.proposals {
            image(&region_map, &z, spec.noise_scale, &mut rng, &mut regions);
        }
        let region_file = PathBuf::from("regions").join(format!("{id}.bicf"));
        write_blob(
            &out_dir.join(&region_file),
            &Tensor::new(vec![dims.frames, dims.proposals, dims.region_dim], regions)?,
        )?;

        let mut frames = Vec::with_capacity(dims.frames * dims.frame_dim());
        for _ in 0..dims.frames {
            image(&frame_map, &z, spec.noise_scale, &mut rng, &mut frames);
        }
        let frame_file = PathBuf::from("frames").join(format!("{id}.bicf"));
        write_blob(
            &out_dir.join(&frame_file),
            &Tensor::new(vec![dims.frames, dims.frame_dim()], frames)?,
        )?;

        let mut captions = Vec::with_capacity(spec.captions_per_video);
        for c in 0..spec.captions_per_video {
            let count = rng.gen_range(spec.min_tokens..=spec.max_tokens);
            let mut tokens = Vec::with_capacity(count * dims.token_dim);
            for _ in 0..count {
                image(&token_map, &z, spec.noise_scale, &mut rng, &mut tokens);
            }
            let cid = format!("{id}_c{c}");
            let token_file = PathBuf::from("tokens").join(format!("{cid}.bicf"));
            write_blob(
                &out_dir.join(&token_file),
                &Tensor::new(vec![count, dims.token_dim], tokens)?,
            )?;
            captions.push(CaptionEntry { id: cid, token_file });
        }
        items.push(ManifestItem {
            id,
            split: split.to_string(),
            region_file,
            frame_file,
            captions,
        });
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    DatasetManifest { dims, items }.write(&manifest_path)?;
    Ok(manifest_path)
}
