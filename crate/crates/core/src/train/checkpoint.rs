//! `<name>.manifest.json` describes every tensor (name, shape, byte offset,
//! length in floats); `<name>.params.bin` holds the raw f32 LE values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{HerrConfig, HerrModel};
use crate::tensor::{ParamStore, Tensor};

const FORMAT: &str = "mmkgc-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f32 values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: HerrConfig,
    pub epoch: usize,
    pub valid_mrr: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HerrModel,
    pub epoch: usize,
    pub valid_mrr: Option<f64>,
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest.json")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".params.bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(prefix: &Path, model: &HerrModel, epoch: usize, valid_mrr: Option<f64>) -> Result<(), TrainError> {
    let (tensors, blob) = pack(&model.params);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        config: model.config.clone(),
        epoch,
        valid_mrr,
        tensors,
    };
    let mp = manifest_path(prefix);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&mp, text).map_err(io(&mp))?;
    let bp = blob_path(prefix);
    fs::write(&bp, blob).map_err(io(&bp))
}

pub(crate) fn pack(params: &ParamStore<f32>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, blob)
}

pub fn load_checkpoint(prefix: &Path) -> Result<Checkpoint, TrainError> {
    let mp = manifest_path(prefix);
    let text = fs::read_to_string(&mp).map_err(io(&mp))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", mp.display())))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(TrainError::Checkpoint(format!(
            "{}: unsupported checkpoint format {} v{}",
            mp.display(),
            manifest.format,
            manifest.version
        )));
    }
    let bp = blob_path(prefix);
    let blob = fs::read(&bp).map_err(io(&bp))?;

    let config = manifest.config.clone();
    let placeholder = config
        .trainable_structure
        .then(|| Tensor::zeros(&[config.num_entities, config.input_dims[2]]));
    let mut model = HerrModel::new(config, placeholder.as_ref(), &mut ChaCha8Rng::seed_from_u64(0))?;
    unpack(&mut model.params, &manifest.tensors, &blob)?;
    Ok(Checkpoint {
        model,
        epoch: manifest.epoch,
        valid_mrr: manifest.valid_mrr,
    })
}

pub(crate) fn unpack(params: &mut ParamStore<f32>, entries: &[TensorEntry], blob: &[u8]) -> Result<(), TrainError> {
    let err = |m: String| Err(TrainError::Checkpoint(m));
    if entries.len() != params.len() {
        return err(format!(
            "checkpoint lists {} tensors, model has {}",
            entries.len(),
            params.len()
        ));
    }
    let mut expected_offset = 0;
    for (id, entry) in params.ids().collect::<Vec<_>>().into_iter().zip(entries) {
        let name = params.name(id).to_string();
        if entry.name != name {
            return err(format!("expected tensor `{name}`, checkpoint has `{}`", entry.name));
        }
        if entry.shape != params.get(id).shape() {
            return err(format!(
                "tensor `{name}` has shape {:?} in the checkpoint, model expects {:?}",
                entry.shape,
                params.get(id).shape()
            ));
        }
        if entry.len != entry.shape.iter().product::<usize>() || entry.offset != expected_offset {
            return err(format!("tensor `{name}` has an inconsistent offset or length"));
        }
        let end = entry.offset + entry.len * 4;
        if end > blob.len() {
            return err(format!(
                "tensor `{name}` runs past the end of the blob ({end} > {} bytes)",
                blob.len()
            ));
        }
        let data: Vec<f32> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *params.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return err(format!(
            "blob holds {} bytes, manifest covers {expected_offset}",
            blob.len()
        ));
    }
    Ok(())
}
