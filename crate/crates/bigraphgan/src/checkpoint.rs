//! Binary checkpoint container: magic `BGG1`, a version, a TOML metadata
//! block, and a named little-endian tensor table. Training checkpoints and
//! the optional perceptual-weights file share this container.
//!
//! Layout:
//! ```text
//! "BGG1"            4 bytes
//! version           u32 LE (currently 1)
//! meta_len          u32 LE, then meta_len bytes of UTF-8 TOML
//! tensor_count      u32 LE
//! per tensor:
//!   name_len        u16 LE, then the UTF-8 name
//!   dtype tag       u8 (1 = f32, 2 = f64)
//!   rank            u8, then rank x u32 LE extents
//!   payload         element count x element size, little-endian
//! ```
//!
//! Save -> load -> save is byte-identical; unknown versions are rejected.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LossWeights, ModelConfig, OptimHyper, TrainState};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"BGG1";
pub const VERSION: u32 = 1;

/// Tensor payload at either supported precision.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(..) => Dtype::F32,
            TensorData::F64(..) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(s, _) | TensorData::F64(s, _) => s,
        }
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        match S::DTYPE {
            Dtype::F32 => TensorData::F32(
                t.shape().to_vec(),
                t.data().iter().map(|v| v.as_f64() as f32).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                t.shape().to_vec(),
                t.data().iter().map(|v| v.as_f64()).collect(),
            ),
        }
    }

    /// Exact conversion; fails when the stored dtype differs from `S`.
    pub fn into_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.dtype() != S::DTYPE {
            return Err(Error::Mismatch(format!(
                "tensor stored as {} but requested as {}",
                self.dtype(),
                S::DTYPE
            )));
        }
        match self {
            TensorData::F32(s, d) => {
                Tensor::from_vec(s.clone(), d.iter().map(|&v| S::from_f64(v as f64)).collect())
            }
            TensorData::F64(s, d) => {
                Tensor::from_vec(s.clone(), d.iter().map(|&v| S::from_f64(v)).collect())
            }
        }
    }
}

/// Write a container file.
pub fn write_container(
    path: &Path,
    meta_toml: &str,
    tensors: &[(String, TensorData)],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = meta_toml.as_bytes();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::contract(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(data.dtype().tag());
        let shape = data.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match data {
            TensorData::F32(_, v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(_, v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a container file back into its metadata text and tensor table.
pub fn read_container(path: &Path) -> Result<(String, Vec<(String, TensorData)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "unexpected end of file".into(),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("bad magic (expected BGG1)".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Mismatch(format!(
            "unsupported container version {version} (supported: {VERSION})"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|_| bad("metadata is not UTF-8".into()))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let tag = take(&mut pos, 1)?[0];
        let dtype = Dtype::from_tag(tag).ok_or_else(|| bad(format!("bad dtype tag {tag}")))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => {
                let raw = take(&mut pos, numel * 4)?;
                TensorData::F32(
                    shape,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            Dtype::F64 => {
                let raw = take(&mut pos, numel * 8)?;
                TensorData::F64(
                    shape,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
        };
        tensors.push((name, data));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((meta, tensors))
}

/// Checkpoint metadata block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub dtype: Dtype,
    pub step: u64,
    pub model: ModelConfig,
    pub hyper: OptimHyper,
    pub weights: LossWeights,
    pub adam_gen_t: u64,
    pub adam_disc_t: u64,
    /// Hex part of the training RNG state (seed bytes).
    pub rng_seed_hex: String,
    pub rng_stream: u64,
    /// Word position as decimal text (u128 does not fit TOML integers).
    pub rng_word_pos: String,
    /// Where the perceptual extractor weights came from.
    pub perceptual_source: String,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}

/// Save the full training state (parameters, optimizer moments, step counter,
/// RNG state, configuration).
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    state: &TrainState<S>,
    weights: &LossWeights,
    perceptual_source: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        dtype: S::DTYPE,
        step: state.step,
        model: state.cfg.clone(),
        hyper: state.hyper,
        weights: *weights,
        adam_gen_t: state.adam_gen.t,
        adam_disc_t: state.adam_disc.t,
        rng_seed_hex: hex_encode(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        perceptual_source: perceptual_source.into(),
    };
    let meta_toml =
        toml::to_string(&meta).map_err(|e| Error::contract(format!("meta serialization: {e}")))?;

    let mut tensors = Vec::new();
    for (name, t) in state.gen.entries() {
        tensors.push((format!("gen.{name}"), TensorData::from_tensor(t)));
    }
    for (name, t) in state.disc.entries() {
        tensors.push((format!("disc.{name}"), TensorData::from_tensor(t)));
    }
    let (gm, gv) = state.adam_gen.moments();
    for (i, (name, _)) in state.gen.entries().enumerate() {
        tensors.push((format!("adam_gen.m.{name}"), TensorData::from_tensor(&gm[i])));
        tensors.push((format!("adam_gen.v.{name}"), TensorData::from_tensor(&gv[i])));
    }
    let (dm, dv) = state.adam_disc.moments();
    for (i, (name, _)) in state.disc.entries().enumerate() {
        tensors.push((format!("adam_disc.m.{name}"), TensorData::from_tensor(&dm[i])));
        tensors.push((format!("adam_disc.v.{name}"), TensorData::from_tensor(&dv[i])));
    }
    write_container(path, &meta_toml, &tensors)
}

/// Load a checkpoint into a freshly rebuilt [`TrainState`]. The stored dtype
/// must match `S`.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(TrainState<S>, CheckpointMeta)> {
    let (meta_toml, tensors) = read_container(path)?;
    let meta: CheckpointMeta = toml::from_str(&meta_toml).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("bad checkpoint metadata: {e}"),
    })?;
    if meta.kind != "checkpoint" {
        return Err(Error::Mismatch(format!(
            "container kind {:?} is not a checkpoint",
            meta.kind
        )));
    }
    if meta.dtype != S::DTYPE {
        return Err(Error::Mismatch(format!(
            "checkpoint dtype {} does not match requested mode {}",
            meta.dtype,
            S::DTYPE
        )));
    }

    let mut state = TrainState::<S>::new(meta.model.clone(), meta.hyper, 0)?;
    let lookup: std::collections::HashMap<&str, &TensorData> = tensors
        .iter()
        .map(|(n, d)| (n.as_str(), d))
        .collect();
    let fetch = |name: String| -> Result<Tensor<S>> {
        lookup
            .get(name.as_str())
            .ok_or_else(|| Error::Mismatch(format!("checkpoint is missing tensor {name}")))?
            .into_tensor()
    };

    let gen_names: Vec<String> = state.gen.entries().map(|(n, _)| n.to_string()).collect();
    for (i, name) in gen_names.iter().enumerate() {
        state.gen.set_by_index(i, fetch(format!("gen.{name}"))?);
    }
    let disc_names: Vec<String> = state.disc.entries().map(|(n, _)| n.to_string()).collect();
    for (i, name) in disc_names.iter().enumerate() {
        state.disc.set_by_index(i, fetch(format!("disc.{name}"))?);
    }
    let mut gm = Vec::new();
    let mut gv = Vec::new();
    for name in &gen_names {
        gm.push(fetch(format!("adam_gen.m.{name}"))?);
        gv.push(fetch(format!("adam_gen.v.{name}"))?);
    }
    state.adam_gen.restore_moments(gm, gv, meta.adam_gen_t);
    let mut dm = Vec::new();
    let mut dv = Vec::new();
    for name in &disc_names {
        dm.push(fetch(format!("adam_disc.m.{name}"))?);
        dv.push(fetch(format!("adam_disc.v.{name}"))?);
    }
    state.adam_disc.restore_moments(dm, dv, meta.adam_disc_t);

    state.step = meta.step;
    let seed_bytes = hex_decode(&meta.rng_seed_hex)
        .filter(|b| b.len() == 32)
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "bad rng seed hex".into(),
        })?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&seed_bytes);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng_stream);
    let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| Error::Format {
        path: path.display().to_string(),
        reason: "bad rng word position".into(),
    })?;
    rng.set_word_pos(word_pos);
    state.rng = rng;

    Ok((state, meta))
}

/// Metadata block of a perceptual-weights container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptualMeta {
    pub kind: String,
    pub dtype: Dtype,
    pub channels: usize,
}

/// Export perceptual extractor weights (template for custom weights).
pub fn save_perceptual<S: Scalar>(
    path: &Path,
    per: &crate::net::PerceptualNet<S>,
    channels: usize,
) -> Result<()> {
    let meta = PerceptualMeta {
        kind: "perceptual".into(),
        dtype: S::DTYPE,
        channels,
    };
    let meta_toml =
        toml::to_string(&meta).map_err(|e| Error::contract(format!("meta serialization: {e}")))?;
    let tensors: Vec<(String, TensorData)> = per
        .store
        .entries()
        .map(|(n, t)| (n.to_string(), TensorData::from_tensor(t)))
        .collect();
    write_container(path, &meta_toml, &tensors)
}

/// Load perceptual extractor weights from the optional weights file.
pub fn load_perceptual<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let (meta_toml, tensors) = read_container(path)?;
    let meta: PerceptualMeta = toml::from_str(&meta_toml).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("bad perceptual metadata: {e}"),
    })?;
    if meta.kind != "perceptual" {
        return Err(Error::Mismatch(format!(
            "container kind {:?} is not a perceptual weights file",
            meta.kind
        )));
    }
    if meta.dtype != S::DTYPE {
        return Err(Error::Mismatch(format!(
            "perceptual weights dtype {} does not match requested mode {}",
            meta.dtype,
            S::DTYPE
        )));
    }
    tensors
        .into_iter()
        .map(|(n, d)| Ok((n, d.into_tensor()?)))
        .collect()
}
