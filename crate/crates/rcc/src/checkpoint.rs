//! Checkpoint files: a JSON manifest followed by raw little-endian arrays.
//!
//! Layout: the 8 magic bytes `RCCKPT01`, the manifest length as a `u64`
//! little-endian integer, the manifest JSON, then the arrays at the byte
//! offsets the manifest lists (relative to the end of the manifest).

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rcc_core::data::Tokenizer;
use rcc_core::model::{ModelConfig, RccModel};
use rcc_core::substrate::{Precision, Scalar};
use rcc_core::training::{Adam, TrainerState};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"RCCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
    pub precision: Precision,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Index of the stage the trainer state belongs to.
    pub stage: usize,
    /// Whether that stage ran to completion.
    pub stage_done: bool,
    pub step: usize,
    pub cursor: usize,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub precision: Precision,
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Vec<ArrayEntry>,
    /// Adam first and second moments, in `f64`, when training state is kept.
    #[serde(default)]
    pub optimizer: Vec<ArrayEntry>,
    #[serde(default)]
    pub progress: Option<Progress>,
}

/// Model weights plus the optional resumable trainer state.
pub struct Checkpoint<T: Scalar> {
    pub model: RccModel<T>,
    pub tokenizer: Tokenizer,
    pub trainer: Option<(Progress, TrainerState)>,
}

fn push_array<U: Scalar>(data: &mut Vec<u8>, entries: &mut Vec<ArrayEntry>, name: &str, shape: &[usize], values: &[U], trainable: bool) {
    let offset = data.len() as u64;
    for v in values {
        v.append_le_bytes(data);
    }
    entries.push(ArrayEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
        bytes: data.len() as u64 - offset,
        precision: U::PRECISION,
        trainable,
    });
}

pub fn to_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut params = Vec::new();
    for (_, p) in ckpt.model.params.iter() {
        push_array(&mut data, &mut params, &p.name, p.tensor.shape(), p.tensor.data(), p.trainable);
    }
    let mut optimizer = Vec::new();
    let mut progress = None;
    if let Some((prog, state)) = &ckpt.trainer {
        for ((_, p), (m, v)) in ckpt.model.params.iter().zip(state.optimizer.m.iter().zip(&state.optimizer.v)) {
            push_array(&mut data, &mut optimizer, &format!("adam.m.{}", p.name), p.tensor.shape(), m, true);
            push_array(&mut data, &mut optimizer, &format!("adam.v.{}", p.name), p.tensor.shape(), v, true);
        }
        progress = Some(Progress {
            step: state.step,
            cursor: state.cursor,
            adam_t: state.optimizer.t,
            ..prog.clone()
        });
    }
    let manifest = Manifest {
        precision: T::PRECISION,
        config: ckpt.model.config.clone(),
        tokenizer: ckpt.tokenizer.clone(),
        params,
        optimizer,
        progress,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Reads the manifest without touching the arrays.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    ensure!(bytes.len() >= 16 && &bytes[..8] == MAGIC, "not a checkpoint file");
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 16 + len, "truncated checkpoint manifest");
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).context("parsing checkpoint manifest")?;
    Ok((manifest, &bytes[16 + len..]))
}

fn read_array<U: Scalar>(data: &[u8], e: &ArrayEntry) -> Result<Vec<U>> {
    ensure!(e.precision == U::PRECISION, "array `{}` stored as {:?}", e.name, e.precision);
    let width = U::PRECISION.bytes();
    let n: usize = e.shape.iter().product();
    ensure!(e.bytes as usize == n * width, "array `{}` has {} bytes for shape {:?}", e.name, e.bytes, e.shape);
    let start = e.offset as usize;
    let slice = data
        .get(start..start + e.bytes as usize)
        .with_context(|| format!("array `{}` runs past the end of the file", e.name))?;
    Ok(slice.chunks_exact(width).map(U::from_le_slice).collect())
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (manifest, data) = read_manifest(bytes)?;
    if manifest.precision != T::PRECISION {
        bail!("checkpoint holds {:?} weights, expected {:?}", manifest.precision, T::PRECISION);
    }
    let mut model = RccModel::<T>::zeros(manifest.config.clone())?;
    ensure!(
        manifest.params.len() == model.params.len(),
        "checkpoint lists {} parameters, the config implies {}",
        manifest.params.len(),
        model.params.len()
    );
    for e in &manifest.params {
        let id = model
            .params
            .id(&e.name)
            .with_context(|| format!("unknown parameter `{}`", e.name))?;
        let p = model.params.get_mut(id);
        ensure!(p.tensor.shape() == e.shape.as_slice(), "shape mismatch for `{}`", e.name);
        let values = read_array::<T>(data, e)?;
        p.tensor.data_mut().copy_from_slice(&values);
        p.trainable = e.trainable;
    }
    let trainer = match &manifest.progress {
        None => None,
        Some(prog) => {
            let mut adam = Adam::new(&model.params);
            adam.t = prog.adam_t;
            for (i, (_, p)) in model.params.iter().enumerate() {
                let find = |kind: &str| {
                    let name = format!("adam.{kind}.{}", p.name);
                    manifest
                        .optimizer
                        .iter()
                        .find(|e| e.name == name)
                        .with_context(|| format!("missing optimizer array `{name}`"))
                };
                adam.m[i] = read_array::<f64>(data, find("m")?)?;
                adam.v[i] = read_array::<f64>(data, find("v")?)?;
            }
            Some((
                prog.clone(),
                TrainerState {
                    step: prog.step,
                    optimizer: adam,
                    cursor: prog.cursor,
                },
            ))
        }
    };
    Ok(Checkpoint {
        model,
        tokenizer: manifest.tokenizer.restore()?,
        trainer,
    })
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
}

/// Precision recorded in a checkpoint file.
pub fn precision_of(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_manifest(&bytes)?.0.precision)
}
