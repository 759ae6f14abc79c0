//! Versioned binary model checkpoints.
//!
//! Layout: magic + format version, a JSON metadata block (model config,
//! feature schema, schema hash), then every store entry in canonical order
//! as name / trainable flag / shape / values / optimizer accumulators, all
//! little-endian f64. Loading rebuilds the graph from the metadata and
//! overwrites its parameters, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{build_model, ModelConfig, ModelGraph};
use crate::synthdata::{hex_digest, FeatureSchema};

const MAGIC: &[u8; 8] = b"PFDCKPT\x01";

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    model_config: ModelConfig,
    schema: FeatureSchema,
    schema_hash: String,
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_f64_slice<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// Serialize the graph; returns the sha256 hex digest of the file bytes.
pub fn save(graph: &ModelGraph, path: &Path) -> Result<String> {
    let meta = Metadata {
        model_config: graph.config.clone(),
        schema: graph.schema.clone(),
        schema_hash: graph.schema.hash(),
    };
    let meta_json = serde_json::to_vec(&meta)?;

    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(MAGIC);
    write_u64(&mut bytes, meta_json.len() as u64)?;
    bytes.extend_from_slice(&meta_json);
    write_u64(&mut bytes, graph.store.len() as u64)?;
    for entry in graph.store.entries() {
        write_u64(&mut bytes, entry.name.len() as u64)?;
        bytes.extend_from_slice(entry.name.as_bytes());
        bytes.push(u8::from(entry.trainable));
        write_u64(&mut bytes, entry.value.shape.len() as u64)?;
        for &d in &entry.value.shape {
            write_u64(&mut bytes, d as u64)?;
        }
        write_f64_slice(&mut bytes, &entry.value.values)?;
        write_f64_slice(&mut bytes, &entry.accum.values)?;
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;

    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_digest(&hasher.finalize()))
}

/// Rebuild a graph from a checkpoint. Returns the graph and the file's
/// sha256 hex digest (the identity an item index is pinned to).
pub fn load(path: &Path) -> Result<(ModelGraph, String)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash = hex_digest(&hasher.finalize());

    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptFile("bad checkpoint magic".into()));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: Metadata = serde_json::from_slice(&meta_buf)?;
    if meta.schema.hash() != meta.schema_hash {
        return Err(Error::SchemaHashMismatch {
            expected: meta.schema_hash,
            got: meta.schema.hash(),
        });
    }

    let mut graph = build_model(&meta.model_config, &meta.schema)?;
    let n = read_u64(&mut r)? as usize;
    if n != graph.store.len() {
        return Err(Error::CorruptFile(format!(
            "checkpoint has {} parameters, rebuilt graph has {}",
            n,
            graph.store.len()
        )));
    }
    for i in 0..n {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::CorruptFile("non-utf8 parameter name".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndims = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let values = read_f64_vec(&mut r, len)?;
        let accum = read_f64_vec(&mut r, len)?;

        let entry = &mut graph.store.entries_mut()[i];
        if entry.name != name || entry.value.shape != shape {
            return Err(Error::CorruptFile(format!(
                "parameter {i} mismatch: checkpoint has `{name}` {shape:?}, graph has `{}` {:?}",
                entry.name, entry.value.shape
            )));
        }
        entry.value.values = values;
        entry.accum.values = accum;
    }
    Ok((graph, hash))
}

/// sha256 of an arbitrary file, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_digest(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Method, SharingMode, Task};
    use crate::synthdata::{generate, GeneratorConfig};

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let ds = generate(&GeneratorConfig {
            num_users: 20,
            num_items: 15,
            num_records: 120,
            split_index: 100,
            seed: 3,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig::new(Method::Pfd, Task::Cvr, SharingMode::ShareExceptUserId, 9);
        let graph = build_model(&cfg, &ds.schema).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let hash1 = save(&graph, &path).unwrap();
        let (loaded, hash2) = load(&path).unwrap();
        assert_eq!(hash1, hash2);
        assert_eq!(graph.store.len(), loaded.store.len());
        for (a, b) in graph.store.entries().iter().zip(loaded.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.accum, b.accum);
        }

        // saving the loaded graph reproduces the same bytes
        let path2 = dir.path().join("model2.ckpt");
        let hash3 = save(&loaded, &path2).unwrap();
        assert_eq!(hash1, hash3);
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(Error::CorruptFile(_))));
    }
}
