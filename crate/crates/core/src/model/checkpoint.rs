//! Single-file checkpoints: magic, canonical JSON header, named tensors as
//! 32-bit little-endian payloads, trailing CRC32 of everything before it.

use std::path::Path;

use serde_json::{json, Value};

use super::{Architecture, ModelBundle, NamedTensors};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STPRCKP1";

/// A model, the config that produced it, and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub bundle: ModelBundle,
    /// Optimizer tensors keyed by `m.<param>` / `v.<param>`.
    pub optimizer: NamedTensors,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = json!({
            "config": Value::Object(self.config.to_flat()),
            "frame": self.bundle.arch.frame,
            "num_actions": self.bundle.arch.num_actions,
            "step": self.step,
        });
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let sections = [("param.", &self.bundle.params), ("buffer.", &self.bundle.buffers), ("adam.", &self.optimizer)];
        let count: usize = sections.iter().map(|(_, t)| t.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, tensors) in sections {
            for (name, t) in tensors.iter() {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                for &s in t.shape() {
                    out.extend_from_slice(&(s as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "STPRCKP1" });
        }
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 4 + 4 {
            return Err(Error::TruncatedPayload { expected: 20, actual: bytes.len() as u64 });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: CHECKPOINT_MAGIC.len() };
        let header_len = r.u32()? as usize;
        let header: Value = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("header is not JSON: {e}")))?;
        let config = match &header["config"] {
            Value::Object(flat) => ExperimentConfig::from_flat(flat)
                .map_err(|e| Error::IncompatibleCheckpoint(format!("config: {e}")))?,
            _ => return Err(Error::IncompatibleCheckpoint("missing config".into())),
        };
        let frame: [usize; 3] = serde_json::from_value(header["frame"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("frame: {e}")))?;
        let num_actions: usize = serde_json::from_value(header["num_actions"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("num_actions: {e}")))?;
        let step: u64 = serde_json::from_value(header["step"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("step: {e}")))?;

        let mut bundle = ModelBundle::new(Architecture::from_config(&config, frame, num_actions), config.seed)?;
        let mut optimizer = NamedTensors::new();
        let mut seen_params = 0;
        let mut seen_buffers = 0;
        let count = r.u32()?;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::IncompatibleCheckpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let data: Vec<f64> =
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
            if let Some(p) = name.strip_prefix("param.") {
                place(&mut bundle.params, p, tensor)?;
                seen_params += 1;
            } else if let Some(b) = name.strip_prefix("buffer.") {
                place(&mut bundle.buffers, b, tensor)?;
                seen_buffers += 1;
            } else if let Some(o) = name.strip_prefix("adam.") {
                optimizer.insert(o, tensor);
            } else {
                return Err(Error::IncompatibleCheckpoint(format!("unknown tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::IncompatibleCheckpoint("trailing bytes after tensors".into()));
        }
        if seen_params != bundle.params.len() || seen_buffers != bundle.buffers.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint holds {seen_params} parameters and {seen_buffers} buffers, architecture needs {} and {}",
                bundle.params.len(),
                bundle.buffers.len()
            )));
        }
        Ok(Self { config, bundle, optimizer, step })
    }
}

fn place(store: &mut NamedTensors, name: &str, tensor: Tensor) -> Result<()> {
    match store.get_mut(name) {
        Some(slot) if slot.shape() == tensor.shape() => {
            *slot = tensor;
            Ok(())
        }
        Some(slot) => Err(Error::IncompatibleCheckpoint(format!(
            "`{name}` has shape {:?}, architecture expects {:?}",
            tensor.shape(),
            slot.shape()
        ))),
        None => Err(Error::IncompatibleCheckpoint(format!("architecture has no tensor `{name}`"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
