use std::path::{Path, PathBuf};

use super::blob::write_blob;
use super::checkpoint::Checkpoint;
use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Session};

/// Runs one video (and its first caption) with attention capture on and
/// writes every captured weight matrix as a blob named after its layer,
/// e.g. `relation.spatial.frame0.layer1.head2.bicf`.
pub fn dump_attention<S: Scalar>(
    ckpt: &Checkpoint<S>,
    data: &Dataset,
    item: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if ckpt.dims != data.dims {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match dataset dims {:?}",
            ckpt.dims, data.dims
        )));
    }
    let index = data
        .videos
        .iter()
        .position(|v| v.id == item)
        .or_else(|| item.parse::<usize>().ok().filter(|&i| i < data.len()))
        .ok_or_else(|| Error::Usage(format!("no video with id or index {item:?}")))?;
    let typed = data.split_one(index).cast::<S>()?;
    let video = &typed.videos[0];
    let model = ckpt.model()?;
    let mut sess = Session::with_capture(&ckpt.params);
    model.embed_video(&mut sess, &video.regions, &video.frames)?;
    if let Some(tokens) = video.captions.first() {
        model.embed_text(&mut sess, tokens)?;
    }
    let mut written = Vec::new();
    for record in sess.take_attention() {
        let path = out_dir.join(format!("{}.bicf", record.label));
        write_blob(&path, &record.weights.to_f32())?;
        written.push(path);
    }
    Ok(written)
}
