//! Dataset manifests and validated in-memory datasets.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob::read_blob;
use crate::error::{Error, Result};
use crate::global::FrameFeatures;
use crate::model::Dims;
use crate::numerics::{Scalar, Tensor};
use crate::relation::RegionSequence;
use crate::text::TokenSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionEntry {
    pub id: String,
    pub token_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub split: String,
    pub region_file: PathBuf,
    pub frame_file: PathBuf,
    #[serde(default)]
    pub captions: Vec<CaptionEntry>,
}

/// On-disk description of a dataset. Blob paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dims: Dims,
    #[serde(default)]
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, format!("cannot read manifest: {e}")))?;
        toml::from_str(&text).map_err(|e| Error::ingest(path, format!("malformed manifest: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub id: String,
    pub tokens: TokenSequence<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub split: String,
    pub regions: RegionSequence<f32>,
    pub frames: FrameFeatures<f32>,
    pub captions: Vec<Caption>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub videos: Vec<Video>,
}

fn expect_shape(path: &Path, t: &Tensor<f32>, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ingest(
            path,
            format!("expected shape {expected:?}, found {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Reads a manifest and every blob it names, validating each blob header
/// against the manifest dims.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let dims = manifest.dims;
    dims.validate()
        .map_err(|e| Error::ingest(manifest_path, e.to_string()))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut video_ids = HashSet::new();
    let mut caption_ids = HashSet::new();
    let mut videos = Vec::with_capacity(manifest.items.len());
    for item in manifest.items {
        if !video_ids.insert(item.id.clone()) {
            return Err(Error::ingest(manifest_path, format!("duplicate video id {}", item.id)));
        }
        let region_path = root.join(&item.region_file);
        let regions = read_blob(&region_path)?;
        expect_shape(&region_path, &regions, &[dims.frames, dims.proposals, dims.region_dim])?;
        let regions = RegionSequence::new(regions).map_err(|e| Error::ingest(&region_path, e.to_string()))?;

        let frame_path = root.join(&item.frame_file);
        let frames = read_blob(&frame_path)?;
        expect_shape(&frame_path, &frames, &[dims.frames, dims.frame_dim()])?;
        let frames = FrameFeatures::new(frames, dims.appearance_dim, dims.motion_dim)
            .map_err(|e| Error::ingest(&frame_path, e.to_string()))?;

        let mut captions = Vec::with_capacity(item.captions.len());
        for cap in item.captions {
            if !caption_ids.insert(cap.id.clone()) {
                return Err(Error::ingest(
                    manifest_path,
                    format!("caption {} is assigned to more than one video", cap.id),
                ));
            }
            let token_path = root.join(&cap.token_file);
            let tokens = read_blob(&token_path)?;
            match tokens.shape() {
                &[s, d] if s >= 1 && d == dims.token_dim => {}
                other => {
                    return Err(Error::ingest(
                        &token_path,
                        format!("expected shape [S, {}], found {other:?}", dims.token_dim),
                    ))
                }
            }
            let tokens = TokenSequence::new(tokens).map_err(|e| Error::ingest(&token_path, e.to_string()))?;
            captions.push(Caption { id: cap.id, tokens });
        }
        videos.push(Video {
            id: item.id,
            split: item.split,
            regions,
            frames,
            captions,
        });
    }
    Ok(Dataset { dims, videos })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn caption_count(&self) -> usize {
        self.videos.iter().map(|v| v.captions.len()).sum()
    }

    /// Videos tagged with `split`, in manifest order.
    pub fn split(&self, split: &str) -> Dataset {
        Dataset {
            dims: self.dims,
            videos: self.videos.iter().filter(|v| v.split == split).cloned().collect(),
        }
    }

    /// The single video at `index`.
    pub fn split_one(&self, index: usize) -> Dataset {
        Dataset {
            dims: self.dims,
            videos: self.videos[index..=index].to_vec(),
        }
    }

    /// Features of every video and caption converted to the run's scalar
    /// kind.
    pub fn cast<S: Scalar>(&self) -> Result<TypedDataset<S>> {
        let videos = self
            .videos
            .iter()
            .map(|v| {
                Ok(TypedVideo {
                    regions: RegionSequence::with_counts(v.regions.tensor().cast(), v.regions.counts().to_vec())?,
                    frames: FrameFeatures::new(
                        v.frames.tensor().cast(),
                        self.dims.appearance_dim,
                        self.dims.motion_dim,
                    )?,
                    captions: v
                        .captions
                        .iter()
                        .map(|c| TokenSequence::new(c.tokens.tensor().cast()))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TypedDataset {
            dims: self.dims,
            videos,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TypedVideo<S> {
    pub regions: RegionSequence<S>,
    pub frames: FrameFeatures<S>,
    pub captions: Vec<TokenSequence<S>>,
}

/// Model-ready copy of a [`Dataset`] in one scalar kind.
#[derive(Debug, Clone)]
pub struct TypedDataset<S> {
    pub dims: Dims,
    pub videos: Vec<TypedVideo<S>>,
}
