//! "PNCK" model checkpoints: magic, u16 version, u32 header length, a JSON
//! header describing the model, then one PTSR record per parameter in
//! declaration order. Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use pinet_tensor::{read_tensor, write_tensor, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gradcam::BaselineCNN;
use crate::layers::Arch;
use crate::pinet::{PiNetModel, Variant};
use crate::segmentation::{SegMode, SegModel};
use crate::training::Trainable;

pub const PNCK_MAGIC: &[u8; 4] = b"PNCK";
pub const PNCK_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Pinet { variant: Variant, arch: Arch },
    Baseline { arch: Arch },
    Segmentation { mode: SegMode, arch: Arch },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelMeta,
    names: Vec<String>,
}

/// Models that can be written to and restored from a checkpoint.
pub trait Checkpoint: Trainable + Sized {
    fn meta(&self) -> ModelMeta;
    fn param_names(&self) -> Vec<String>;
    /// A model with the given structure and arbitrary parameter values.
    fn skeleton(meta: &ModelMeta) -> Result<Self>;
}

impl Checkpoint for PiNetModel {
    fn meta(&self) -> ModelMeta {
        ModelMeta::Pinet {
            variant: self.variant,
            arch: self.arch.clone(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        PiNetModel::param_names(self)
    }

    fn skeleton(meta: &ModelMeta) -> Result<Self> {
        match meta {
            ModelMeta::Pinet { variant, arch } => PiNetModel::new(*variant, arch.clone(), 0),
            other => Err(mismatch("pinet", other)),
        }
    }
}

impl Checkpoint for BaselineCNN {
    fn meta(&self) -> ModelMeta {
        ModelMeta::Baseline { arch: self.arch.clone() }
    }

    fn param_names(&self) -> Vec<String> {
        BaselineCNN::param_names(self)
    }

    fn skeleton(meta: &ModelMeta) -> Result<Self> {
        match meta {
            ModelMeta::Baseline { arch } => BaselineCNN::new(arch.clone(), 0),
            other => Err(mismatch("baseline", other)),
        }
    }
}

impl Checkpoint for SegModel {
    fn meta(&self) -> ModelMeta {
        ModelMeta::Segmentation {
            mode: self.mode,
            arch: self.arch.clone(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        SegModel::param_names(self)
    }

    fn skeleton(meta: &ModelMeta) -> Result<Self> {
        match meta {
            ModelMeta::Segmentation { mode, arch } => SegModel::new(*mode, arch.clone(), 0),
            other => Err(mismatch("segmentation", other)),
        }
    }
}

fn mismatch(expected: &str, found: &ModelMeta) -> CoreError {
    CoreError::Format(format!("checkpoint holds {found:?}, expected a {expected} model"))
}

fn tensor_err(e: TensorError) -> CoreError {
    match e {
        TensorError::Io(io) => CoreError::Format(format!("truncated checkpoint: {io}")),
        other => other.into(),
    }
}

pub fn write_checkpoint<M: Checkpoint, W: Write>(mut w: W, model: &M) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        model: model.meta(),
        names: model.param_names(),
    })?;
    let len = u32::try_from(header.len()).map_err(|_| CoreError::Format("checkpoint header too large".into()))?;
    let io = |e: std::io::Error| CoreError::Format(format!("checkpoint write failed: {e}"));
    w.write_all(PNCK_MAGIC).map_err(io)?;
    w.write_all(&PNCK_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&len.to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for t in model.params() {
        write_tensor(&mut w, t).map_err(tensor_err)?;
    }
    Ok(())
}

pub fn read_checkpoint<M: Checkpoint, R: Read>(mut r: R) -> Result<M> {
    let io = |e: std::io::Error| CoreError::Format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != PNCK_MAGIC {
        return Err(CoreError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2).map_err(io)?;
    let version = u16::from_le_bytes(buf2);
    if version != PNCK_VERSION {
        return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io)?;
    let mut header = vec![0u8; u32::from_le_bytes(buf4) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut model = M::skeleton(&header.model)?;
    if model.param_names() != header.names {
        return Err(CoreError::Format("checkpoint parameter names do not match the model".into()));
    }
    let names = header.names;
    for (p, name) in model.params_mut().into_iter().zip(&names) {
        let t: Tensor = read_tensor(&mut r).map_err(tensor_err)?;
        if t.shape() != p.shape() {
            return Err(CoreError::Format(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(model)
}

pub fn save_checkpoint<M: Checkpoint>(path: impl AsRef<Path>, model: &M) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model)?;
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint<M: Checkpoint>(path: impl AsRef<Path>) -> Result<M> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
