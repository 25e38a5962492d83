//! Checkpointing: a JSON manifest describing every tensor plus a raw
//! little-endian payload. Parameters and optimizer moments round-trip
//! bitwise, and a manifest that disagrees with the model it is loaded into
//! fails loudly, naming the offending tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{MmptError, Result};
use crate::model::MmptModel;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub dtype: Dtype,
    pub step: usize,
    pub clamped_total: u64,
    pub last_loss: Option<f64>,
    /// Every model tensor, in payload order.
    pub tensors: Vec<TensorEntry>,
    /// Names carrying Adam first/second moments, in payload order after the
    /// parameters (first all m, then all v).
    pub moment_tensors: Vec<String>,
    pub payload_bytes: u64,
}

fn append_tensor<S: Scalar>(buf: &mut Vec<u8>, t: &Tensor<S>) {
    for &v in t.data() {
        v.write_le(buf);
    }
}

/// Writes `manifest.json` and `payload.bin` into `dir`, creating it.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    model: &MmptModel<S>,
    state: &TrainState<S>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let width = S::DTYPE.byte_width();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() });
        append_tensor(&mut payload, t);
    }
    let mut moment_tensors = Vec::new();
    for (name, (m, _)) in &state.moments {
        moment_tensors.push(name.clone());
        append_tensor(&mut payload, m);
    }
    for (_, (_, v)) in &state.moments {
        append_tensor(&mut payload, v);
    }
    debug_assert_eq!(payload.len() % width, 0);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash(model.cfg()),
        dtype: S::DTYPE,
        step: state.step,
        clamped_total: state.clamped_total,
        last_loss: state.last_loss,
        tensors,
        moment_tensors,
        payload_bytes: payload.len() as u64,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(MmptError::from)?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    std::fs::write(dir.join(PAYLOAD_FILE), payload)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| MmptError::corrupt(format!("reading {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    width: usize,
}

impl<'a> PayloadReader<'a> {
    fn take<S: Scalar>(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor<S>> {
        let n = rows * cols;
        let len = n * self.width;
        let end = self.offset + len;
        if end > self.bytes.len() {
            return Err(MmptError::corrupt(format!(
                "payload truncated inside tensor {name}: needs {end} bytes, has {}",
                self.bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in self.bytes[self.offset..end].chunks_exact(self.width) {
            data.push(S::read_le(chunk));
        }
        self.offset = end;
        Ok(Tensor::from_vec(rows, cols, data))
    }
}

/// Loads a checkpoint into `model`, returning the optimizer state. The
/// stored configuration hash must match the model's unless `force`; every
/// tensor must exist with its stored shape.
pub fn load_checkpoint<S: Scalar>(
    dir: &Path,
    model: &mut MmptModel<S>,
    force: bool,
) -> Result<TrainState<S>> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(MmptError::corrupt(format!(
            "checkpoint format {} is not the supported {CHECKPOINT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(MmptError::config(format!(
            "checkpoint holds {} tensors but the model runs {}",
            manifest.dtype.name(),
            S::DTYPE.name()
        )));
    }
    let own_hash = config_hash(model.cfg());
    if manifest.config_hash != own_hash {
        if !force {
            return Err(MmptError::config(format!(
                "checkpoint config hash {} != model {own_hash}; pass force to override",
                manifest.config_hash
            )));
        }
        log::warn!("loading checkpoint with mismatched config hash (forced)");
    }

    // The stored tensor set must be exactly the model's.
    if manifest.tensors.len() != model.params().len() {
        return Err(MmptError::config(format!(
            "checkpoint stores {} tensors, model has {}",
            manifest.tensors.len(),
            model.params().len()
        )));
    }
    for entry in &manifest.tensors {
        if !model.params().contains(&entry.name) {
            return Err(MmptError::config(format!(
                "checkpoint tensor {} does not exist in the model",
                entry.name
            )));
        }
        let t = model.params().get(&entry.name);
        if t.rows() != entry.rows || t.cols() != entry.cols {
            return Err(MmptError::config(format!(
                "tensor {} is {}x{} in the checkpoint but {}x{} in the model",
                entry.name,
                entry.rows,
                entry.cols,
                t.rows(),
                t.cols()
            )));
        }
    }

    let path = dir.join(PAYLOAD_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| MmptError::corrupt(format!("reading {}: {e}", path.display())))?;
    if bytes.len() as u64 != manifest.payload_bytes {
        return Err(MmptError::corrupt(format!(
            "payload is {} bytes but the manifest says {}",
            bytes.len(),
            manifest.payload_bytes
        )));
    }
    let mut reader =
        PayloadReader { bytes: &bytes, offset: 0, width: S::DTYPE.byte_width() };
    for entry in &manifest.tensors {
        let t = reader.take::<S>(&entry.name, entry.rows, entry.cols)?;
        *model.params_mut().get_mut(&entry.name) = t;
    }
    let mut state = TrainState::new();
    state.step = manifest.step;
    state.clamped_total = manifest.clamped_total;
    state.last_loss = manifest.last_loss;
    let shapes: Vec<(usize, usize)> = manifest
        .moment_tensors
        .iter()
        .map(|name| {
            if !model.params().contains(name) {
                return Err(MmptError::config(format!(
                    "moment tensor {name} does not exist in the model"
                )));
            }
            let t = model.params().get(name);
            Ok((t.rows(), t.cols()))
        })
        .collect::<Result<_>>()?;
    let mut first = Vec::with_capacity(shapes.len());
    for (name, &(r, c)) in manifest.moment_tensors.iter().zip(&shapes) {
        first.push(reader.take::<S>(name, r, c)?);
    }
    for ((name, &(r, c)), m) in manifest.moment_tensors.iter().zip(&shapes).zip(first) {
        let v = reader.take::<S>(name, r, c)?;
        state.moments.insert(name.clone(), (m, v));
    }
    if reader.offset != bytes.len() {
        return Err(MmptError::corrupt(format!(
            "payload has {} trailing bytes after the last tensor",
            bytes.len() - reader.offset
        )));
    }
    Ok(state)
}
