//! Single-file checkpoint archive: a JSON header (config snapshot, trainer
//! state, entry table) followed by raw little-endian `f64` payloads. Entries
//! are named `param/<module.path>`, `adam_m/...`, `adam_v/...`, so every
//! module (`keypoint_detector`, `dense_motion`, `generator`, `discriminator`)
//! appears under its own prefix.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: u64,
    pub step: u64,
    /// Word position of the training RNG stream (ChaCha), for exact resume.
    pub rng_word_pos: u128,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Header {
    pub config: Config,
    pub state: TrainerState,
    entries: Vec<EntryMeta>,
}

impl Header {
    /// Entry names and shapes, in archive order.
    pub fn entry_summaries(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect()
    }
}

pub fn save(path: &Path, config: &Config, state: &TrainerState, store: &ParamStore) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    {
        let mut push = |name: String, arr: &ArrayD<f64>| {
            entries.push(EntryMeta {
                name,
                shape: arr.shape().to_vec(),
                offset: payload.len() as u64,
                len: arr.len() as u64,
            });
            payload.extend(arr.iter());
        };
        for slot in store.iter() {
            push(format!("param/{}", slot.name), &slot.value);
            push(format!("adam_m/{}", slot.name), &slot.m);
            push(format!("adam_v/{}", slot.name), &slot.v);
        }
    }
    let header = Header {
        config: config.clone(),
        state: state.clone(),
        entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |buf: &[u8]| -> Result<()> {
        file.write_all(buf).map_err(|e| Error::io(path, e))
    };
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header_json.len() as u64).to_le_bytes())?;
    write(&header_json)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write(&bytes)?;
    file.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_header(file: &mut fs::File, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut v = [0u8; 4];
    file.read_exact(&mut v).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut l = [0u8; 8];
    file.read_exact(&mut l).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(l) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))
}

/// Read only the header (used by `inspect-checkpoint`).
pub fn load_header(path: &Path) -> Result<Header> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut file, path)
}

pub struct Loaded {
    pub header: Header,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(&mut file, path)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut arrays = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("entry {} out of bounds", e.name)));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), payload[start..end].to_vec())
            .map_err(|err| Error::Checkpoint(format!("entry {}: {err}", e.name)))?;
        arrays.push((e.name.clone(), arr));
    }
    Ok(Loaded { header, arrays })
}

/// Fill a freshly built store from archive entries; every parameter must be
/// covered exactly once with a matching shape.
pub fn apply_to_store(loaded: &Loaded, store: &mut ParamStore) -> Result<()> {
    use std::collections::HashMap;
    let mut by_name: HashMap<&str, &ArrayD<f64>> = HashMap::new();
    for (name, arr) in &loaded.arrays {
        by_name.insert(name.as_str(), arr);
    }
    for idx in 0..store.len() {
        let name = store.slot(idx).name.clone();
        for (prefix, which) in [("param", 0usize), ("adam_m", 1), ("adam_v", 2)] {
            let key = format!("{prefix}/{name}");
            let arr = by_name.remove(key.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing entry {key}"))
            })?;
            let slot = store.slot_mut(idx);
            let target = match which {
                0 => &mut slot.value,
                1 => &mut slot.m,
                _ => &mut slot.v,
            };
            if target.shape() != arr.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {key} has shape {:?}, expected {:?}",
                    arr.shape(),
                    target.shape()
                )));
            }
            *target = arr.clone();
        }
    }
    if !by_name.is_empty() {
        let extra: Vec<&str> = by_name.keys().cloned().take(3).collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} unmatched entries (e.g. {:?})",
            by_name.len(),
            extra
        )));
    }
    Ok(())
}
