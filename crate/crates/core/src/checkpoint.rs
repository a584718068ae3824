//! Checkpoint directories: `manifest.json` plus one PTNSR blob per tensor.
//!
//! The manifest records a format version, the model config, and for each
//! tensor its name, file, shape and the SHA-256 of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::model::{PhysMambaConfig, PhysMambaWeights};
use crate::ptnsr;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: PhysMambaConfig,
    pub tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(
    weights: &PhysMambaWeights,
    cfg: &PhysMambaConfig,
    dir: &Path,
) -> Result<CheckpointManifest> {
    cfg.validate()?;
    weights.validate(cfg)?;
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in weights.named_tensors() {
        let bytes = ptnsr::encode(&t);
        let file = format!("{name}.ptnsr");
        ptnsr::write_atomic(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    ptnsr::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_slice(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest lacks an integer format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(PhysMambaConfig, PhysMambaWeights)> {
    let manifest = read_manifest(dir)?;
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &manifest.tensors {
        if by_name.insert(&e.name, e).is_some() {
            return Err(Error::Format(format!("tensor {} listed twice", e.name)));
        }
    }
    let expected = PhysMambaWeights::expected_shapes(&cfg);
    for name in by_name.keys() {
        if !expected.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!(
                "unexpected tensor {name} in manifest"
            )));
        }
    }
    let weights = PhysMambaWeights::from_named(&cfg, |name| {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lacks tensor {name}")))?;
        let bytes = fs::read(dir.join(&e.file))?;
        let t = ptnsr::decode(&bytes)?;
        let digest = sha256_hex(&bytes);
        if digest != e.sha256 {
            return Err(Error::Checksum(format!(
                "{}: sha256 {digest}, manifest says {}",
                e.file, e.sha256
            )));
        }
        if t.shape() != e.shape.as_slice() {
            return Err(shape_err!(
                "{}: blob shape {:?}, manifest says {:?}",
                e.file,
                t.shape(),
                e.shape
            ));
        }
        Ok(t)
    })?;
    Ok((cfg, weights))
}
