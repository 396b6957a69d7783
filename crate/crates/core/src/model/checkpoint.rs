//! Checkpoints: a JSON manifest naming each site's shape and byte offset,
//! plus one little-endian f32 payload file.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DenoiserParams, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::lora::TaskVector;
use crate::scalar::Scalar;
use crate::text::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "motion-unlearn-checkpoint";
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "payload.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    TaskVector,
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteRecord {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
    payload_bytes: u64,
    sites: Vec<SiteRecord>,
}

fn write<'a, S: Scalar + 'a>(
    dir: &Path,
    kind: CheckpointKind,
    config: Option<ModelConfig>,
    vocab: Option<Vocab>,
    sites: impl Iterator<Item = (&'a str, &'a Array2<S>)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let mut records = Vec::new();
    for (name, value) in sites {
        records.push(SiteRecord {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            dtype: "float32".into(),
            offset: payload.len() as u64,
        });
        for x in value.iter() {
            payload.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind,
        config,
        vocab,
        payload_bytes: payload.len() as u64,
        sites: records,
    };
    fs::write(dir.join(PAYLOAD), &payload)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read<S: Scalar>(dir: &Path, kind: CheckpointKind) -> Result<(Manifest, Vec<(String, Array2<S>)>)> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    let bad = |reason: String| Error::format(&mpath, reason);
    if manifest.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.kind != kind {
        return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", manifest.kind)));
    }
    let payload = fs::read(dir.join(PAYLOAD))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::format(
            dir.join(PAYLOAD),
            format!("{} bytes, manifest says {}", payload.len(), manifest.payload_bytes),
        ));
    }
    let mut sites = Vec::with_capacity(manifest.sites.len());
    for rec in &manifest.sites {
        if rec.dtype != "float32" {
            return Err(bad(format!("site {} has unsupported dtype {}", rec.name, rec.dtype)));
        }
        let n = rec.shape[0] * rec.shape[1];
        let start = rec.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| bad(format!("site {} runs past the payload", rec.name)))?;
        let values: Vec<S> = bytes
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let arr = Array2::from_shape_vec((rec.shape[0], rec.shape[1]), values).expect("length checked");
        sites.push((rec.name.clone(), arr));
    }
    Ok((manifest, sites))
}

/// Writes `params` into directory `dir`. Values are stored as f32.
pub fn save_model<S: Scalar>(params: &DenoiserParams<S>, dir: &Path) -> Result<()> {
    write(
        dir,
        CheckpointKind::Model,
        Some(params.config().clone()),
        Some(params.vocab().clone()),
        params.store().iter(),
    )
}

pub fn load_model<S: Scalar>(dir: &Path) -> Result<DenoiserParams<S>> {
    let (manifest, sites) = read::<S>(dir, CheckpointKind::Model)?;
    let mpath = dir.join(MANIFEST);
    let config = manifest
        .config
        .ok_or_else(|| Error::format(&mpath, "model checkpoint without config"))?;
    let vocab = manifest
        .vocab
        .ok_or_else(|| Error::format(&mpath, "model checkpoint without vocabulary"))?;
    let mut store = ParamStore::new();
    for (name, value) in sites {
        store.insert(name, value)?;
    }
    DenoiserParams::from_parts(config, vocab, store)
}

pub fn save_task_vector<S: Scalar>(delta: &TaskVector<S>, dir: &Path) -> Result<()> {
    write(
        dir,
        CheckpointKind::TaskVector,
        None,
        None,
        delta.increments.iter().map(|(k, v)| (k.as_str(), v)),
    )
}

pub fn load_task_vector<S: Scalar>(dir: &Path) -> Result<TaskVector<S>> {
    let (_, sites) = read::<S>(dir, CheckpointKind::TaskVector)?;
    let mut increments = std::collections::BTreeMap::new();
    for (name, value) in sites {
        if increments.insert(name.clone(), value).is_some() {
            return Err(Error::format(dir.join(MANIFEST), format!("duplicate site {name}")));
        }
    }
    Ok(TaskVector { increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_adapters, extract_task_vector, LoraConfig};
    use crate::model::randn;
    use crate::seed;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = DenoiserParams::<f32>::init(ModelConfig::tiny(), 8).unwrap();
        save_model(&params, dir.path()).unwrap();
        let back: DenoiserParams<f32> = load_model(dir.path()).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.store().fingerprint(), params.store().fingerprint());
        assert!(load_task_vector::<f32>(dir.path()).is_err());
    }

    #[test]
    fn task_vector_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let params = DenoiserParams::<f32>::init(ModelConfig::tiny(), 8).unwrap();
        let mut set = attach_adapters(&params, &LoraConfig::default(), 2).unwrap();
        let mut rng = seed::rng(0);
        for a in set.adapters_mut() {
            a.b = randn(&mut rng, a.b.nrows(), a.b.ncols(), 1.0);
        }
        let tv = extract_task_vector(&set);
        save_task_vector(&tv, dir.path()).unwrap();
        assert_eq!(load_task_vector::<f32>(dir.path()).unwrap(), tv);
        let payload = dir.path().join(PAYLOAD);
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_task_vector::<f32>(dir.path()), Err(Error::Format { .. })));
    }
}
