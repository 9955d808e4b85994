//! Checkpoint archives: a directory holding `manifest.json` (run metadata),
//! `params.bin` (little-endian f32 tensors back to back) and
//! `params.index.json` (name, shape and byte range of each tensor).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const INDEX_FILE: &str = "params.index.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next epoch whose streams have not been consumed.
    pub next_epoch: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Echo of the resolved run configuration.
    pub config: serde_json::Value,
    pub epoch: usize,
    #[serde(default)]
    pub loss_history: Vec<f64>,
    #[serde(default)]
    pub val_accuracy_history: Vec<f64>,
    #[serde(default)]
    pub rng_state: RngState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `params` and `meta` to `dir`. The archive is assembled in a
/// sibling temporary directory and renamed into place, so `dir` either holds
/// a complete archive or is left as it was.
pub fn save_checkpoint(params: &ParamSet, meta: &RunMeta, dir: &Path) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for name in params.names() {
        if !seen.insert(name) {
            return Err(Error::validation(format!("duplicate parameter name `{name}`")));
        }
    }
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let leaf = dir
        .file_name()
        .ok_or_else(|| Error::validation(format!("checkpoint path {} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{leaf}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut bin = Vec::new();
    let mut index = Vec::with_capacity(params.len());
    for t in params.iter() {
        let offset = bin.len() as u64;
        for v in &t.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        index.push(IndexEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            byte_offset: offset,
            byte_length: bin.len() as u64 - offset,
        });
    }
    write_file(&tmp.join(PARAMS_FILE), &bin)?;
    write_file(&tmp.join(INDEX_FILE), serde_json::to_string_pretty(&index)?.as_bytes())?;
    write_file(&tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(meta)?.as_bytes())?;

    let backup = parent.join(format!(".{leaf}.old-{}", std::process::id()));
    let had_previous = dir.exists();
    if had_previous {
        fs::rename(dir, &backup).map_err(|e| Error::io(dir, e))?;
    }
    if let Err(e) = fs::rename(&tmp, dir) {
        if had_previous {
            let _ = fs::rename(&backup, dir);
        }
        return Err(Error::io(dir, e));
    }
    if had_previous {
        fs::remove_dir_all(&backup).map_err(|e| Error::io(&backup, e))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, RunMeta)> {
    let meta: RunMeta = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?;
    let index: Vec<IndexEntry> = serde_json::from_slice(&read(&dir.join(INDEX_FILE))?)?;
    let bin = read(&dir.join(PARAMS_FILE))?;

    let mut cursor = 0u64;
    let mut params = ParamSet::new();
    for e in &index {
        let expected = e.shape.iter().product::<usize>() as u64 * 4;
        if e.byte_length != expected {
            return Err(Error::Corruption(format!(
                "`{}`: byte_length {} does not match shape {:?}",
                e.name, e.byte_length, e.shape
            )));
        }
        if e.byte_offset < cursor {
            return Err(Error::Corruption(format!("`{}`: overlapping or unordered byte range", e.name)));
        }
        let end = e.byte_offset + e.byte_length;
        if end > bin.len() as u64 {
            return Err(Error::Corruption(format!(
                "`{}`: range ends at byte {end} but {PARAMS_FILE} has {} bytes",
                e.name,
                bin.len()
            )));
        }
        let data = bin[e.byte_offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params
            .push(e.name.clone(), e.shape.clone(), data)
            .map_err(|err| Error::Corruption(err.to_string()))?;
        cursor = end;
    }
    if cursor != bin.len() as u64 {
        return Err(Error::Corruption(format!(
            "{PARAMS_FILE} has {} bytes but the index covers {cursor}",
            bin.len()
        )));
    }
    Ok((params, meta))
}

/// Reads only the run metadata of an archive.
pub fn load_meta(dir: &Path) -> Result<RunMeta> {
    Ok(serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?)
}
