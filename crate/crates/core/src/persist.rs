//! On-disk formats: scene pools as JSON-lines plus a manifest, and base64
//! little-endian encodings for dense float arrays.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenegen::{GenConfig, Scene};

pub const SCHEMA_VERSION: u32 = 1;
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub mod f32_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(D::Error::custom("f32 payload length not a multiple of 4"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub mod f64_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("f64 payload length not a multiple of 8"));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolManifest {
    pub schema_version: u32,
    pub config: GenConfig,
    pub n_scenes: usize,
    pub first_scene_id: u64,
    /// SHA-256 of `scenes.jsonl`, hex.
    pub content_hash: String,
}

/// Serializes scenes as JSON-lines.
pub fn encode_scenes(scenes: &[Scene]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `scenes.jsonl` and `manifest.json` into `dir`.
pub fn write_pool(dir: &Path, cfg: &GenConfig, scenes: &[Scene]) -> Result<PoolManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_scenes(scenes)?;
    let manifest = PoolManifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        n_scenes: scenes.len(),
        first_scene_id: cfg.first_scene_id,
        content_hash: sha256_hex(&bytes),
    };
    let scenes_path = dir.join(SCENES_FILE);
    fs::write(&scenes_path, &bytes).map_err(|e| Error::io(&scenes_path, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a pool written by [`write_pool`], verifying its content hash.
pub fn read_pool(dir: &Path) -> Result<(PoolManifest, Vec<Scene>)> {
    let manifest: PoolManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Corrupt(format!(
            "pool schema version {} unsupported",
            manifest.schema_version
        )));
    }
    let scenes_path = dir.join(SCENES_FILE);
    let bytes = fs::read(&scenes_path).map_err(|e| Error::io(&scenes_path, e))?;
    let hash = sha256_hex(&bytes);
    if hash != manifest.content_hash {
        return Err(Error::Corrupt(format!(
            "{} hash {hash} does not match manifest {}",
            scenes_path.display(),
            manifest.content_hash
        )));
    }
    let mut scenes = Vec::with_capacity(manifest.n_scenes);
    for line in BufReader::new(bytes.as_slice()).lines() {
        let line = line.map_err(|e| Error::io(&scenes_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line)?);
    }
    if scenes.len() != manifest.n_scenes {
        return Err(Error::Corrupt(format!(
            "manifest lists {} scenes, file has {}",
            manifest.n_scenes,
            scenes.len()
        )));
    }
    Ok((manifest, scenes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `contents` atomically via a temporary sibling file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::generate_pool;

    #[test]
    fn pool_round_trip_and_hash_check() {
        let cfg = GenConfig {
            n_scenes: 3,
            seed: 4,
            ..GenConfig::default()
        };
        let scenes = generate_pool(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_pool(dir.path(), &cfg, &scenes).unwrap();
        let (m2, back) = read_pool(dir.path()).unwrap();
        assert_eq!(manifest.content_hash, m2.content_hash);
        assert_eq!(back, scenes);

        let path = dir.path().join(SCENES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(b'\n');
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_pool(dir.path()), Err(Error::Corrupt(_))));
    }
}
