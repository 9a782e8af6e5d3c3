//! Checkpoint container: `"BICC"`, u32 version, u32 scalar tag (32 or 64),
//! the config snapshot as length-prefixed TOML, the six dataset dims, the
//! step count, named parameter records, then the optimizer state. Values
//! are stored in the run's scalar width, little-endian, so a round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use super::blob::Reader;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BiCNet, Dims};
use crate::numerics::{AdamState, ParamStore, Scalar, ScalarKind, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BICC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: TrainConfig,
    pub dims: Dims,
    pub step: u64,
    pub params: ParamStore<S>,
    pub adam: AdamState<S>,
}

/// A checkpoint of either scalar kind, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    Training32(Checkpoint<f32>),
    Verification64(Checkpoint<f64>),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u32(out, e as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn get_str(r: &mut Reader<'_>) -> std::result::Result<String, String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|e| format!("invalid UTF-8: {e}"))
}

fn get_tensor<S: Scalar>(r: &mut Reader<'_>) -> std::result::Result<Tensor<S>, String> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let shape = (0..rank)
        .map(|_| r.u32().map(|e| e as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let numel: usize = shape.iter().product();
    let width = S::KIND.byte_width();
    let bytes = r.take(numel.checked_mul(width).ok_or("extent overflow")?)?;
    let data = bytes.chunks_exact(width).map(S::read_le).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, S::KIND.tag());
        put_str(&mut out, &self.config.to_toml());
        let d = self.dims;
        for v in [
            d.frames,
            d.proposals,
            d.region_dim,
            d.appearance_dim,
            d.motion_dim,
            d.token_dim,
        ] {
            put_u32(&mut out, v as u32);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_str(&mut out, &p.name);
            put_tensor(&mut out, &p.value);
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for v in [
            self.adam.beta1,
            self.adam.beta2,
            self.adam.epsilon,
            self.adam.learning_rate,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (m, v) in self.adam.first_moment.iter().zip(&self.adam.second_moment) {
            put_tensor(&mut out, m);
            put_tensor(&mut out, v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (kind, mut r) = read_header(bytes)?;
        if kind != S::KIND {
            return Err(Error::Format(format!(
                "checkpoint holds {kind} scalars, this run uses {}",
                S::KIND
            )));
        }
        Self::decode_body(&mut r).map_err(Error::Format)
    }

    fn decode_body(r: &mut Reader<'_>) -> std::result::Result<Self, String> {
        let config = TrainConfig::from_toml(&get_str(r)?).map_err(|e| e.to_string())?;
        let mut d = [0usize; 6];
        for v in &mut d {
            *v = r.u32()? as usize;
        }
        let dims = Dims {
            frames: d[0],
            proposals: d[1],
            region_dim: d[2],
            appearance_dim: d[3],
            motion_dim: d[4],
            token_dim: d[5],
        };
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let (_, mut params) = BiCNet::build::<S>(config.model_spec(dims), config.variant, config.seed)
            .map_err(|e| format!("cannot rebuild model: {e}"))?;
        if count != params.len() {
            return Err(format!("{count} parameter records, model expects {}", params.len()));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = get_str(r)?;
            let value = get_tensor::<S>(r)?;
            let expected = params.get(id);
            if name != expected.name || value.shape() != expected.value.shape() {
                return Err(format!(
                    "record {name} {:?} does not match model parameter {} {:?}",
                    value.shape(),
                    expected.name,
                    expected.value.shape()
                ));
            }
            *params.value_mut(id) = value;
        }
        let mut adam = AdamState::new(&params, 0.0);
        adam.step = r.u64()?;
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.epsilon = r.f64()?;
        adam.learning_rate = r.f64()?;
        for (i, p) in params.iter().enumerate() {
            let m = get_tensor::<S>(r)?;
            let v = get_tensor::<S>(r)?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(format!("optimizer moments for {} have the wrong shape", p.name));
            }
            adam.first_moment[i] = m;
            adam.second_moment[i] = v;
        }
        if r.remaining() != 0 {
            return Err(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Checkpoint {
            config,
            dims,
            step,
            params,
            adam,
        })
    }

    /// Model structure matching the stored parameters.
    pub fn model(&self) -> Result<BiCNet> {
        let (model, _) = BiCNet::build::<S>(self.config.model_spec(self.dims), self.config.variant, self.config.seed)?;
        Ok(model)
    }
}

fn read_header(bytes: &[u8]) -> Result<(ScalarKind, Reader<'_>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4).map_err(Error::Format)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32().map_err(Error::Format)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let tag = r.u32().map_err(Error::Format)?;
    let kind = ScalarKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown scalar tag {tag}")))?;
    Ok((kind, r))
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

pub fn load_any_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind, _) = read_header(&bytes)?;
    Ok(match kind {
        ScalarKind::Training32 => AnyCheckpoint::Training32(Checkpoint::decode(&bytes)?),
        ScalarKind::Verification64 => AnyCheckpoint::Verification64(Checkpoint::decode(&bytes)?),
    })
}
