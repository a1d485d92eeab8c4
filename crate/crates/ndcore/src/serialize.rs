//! Single-file parameter container.
//!
//! Layout: magic bytes `EVAMP01`, u32 LE manifest length, JSON manifest
//! (version, ordered entries with name/shape/offset), then the raw
//! little-endian float64 payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::store::ParamStore;
use crate::{NdError, Result};

pub const FORMAT_MAGIC: &[u8; 7] = b"EVAMP01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the payload
    offset: u64,
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            offset,
        });
        offset += (p.data.len() * 8) as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: FORMAT_VERSION,
        params: entries,
    })
    .map_err(|e| NdError::Format(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FORMAT_MAGIC)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, p) in store.iter() {
        for x in &p.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != FORMAT_MAGIC {
        return Err(NdError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, FORMAT_MAGIC
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let mlen = u32::from_le_bytes(len_bytes) as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf)?;
    let manifest: Manifest =
        serde_json::from_slice(&mbuf).map_err(|e| NdError::Format(format!("manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(NdError::Format(format!(
            "unsupported format version {} (expected {})",
            manifest.version, FORMAT_VERSION
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    let mut expected_end = 0u64;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if e.offset != expected_end || end > payload.len() {
            return Err(NdError::Format(format!(
                "corrupt file: manifest entry '{}' disagrees with payload length {}",
                e.name,
                payload.len()
            )));
        }
        expected_end = end as u64;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&e.name, &e.shape, data)?;
    }
    if expected_end as usize != payload.len() {
        return Err(NdError::Format(format!(
            "corrupt file: {} trailing payload bytes",
            payload.len() - expected_end as usize
        )));
    }
    Ok(store)
}
