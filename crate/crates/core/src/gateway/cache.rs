use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

#[derive(Debug, Error)]
#[error("cache file {path}: {source}")]
pub struct CacheError {
    path: String,
    #[source]
    source: std::io::Error,
}

/// Append-only key/value store of serialized responses.
///
/// On disk: repeated records of `u32 key_len | key | u32 value_len | value`,
/// little-endian. A torn trailing record left by a crash is dropped and the
/// file truncated back to the last complete record when reopened.
#[derive(Default)]
pub struct ResponseCache {
    map: RwLock<HashMap<String, Vec<u8>>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let err = |source| CacheError { path: path.display().to_string(), source };
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(err)?;
        let (map, valid_len) = decode_records(&bytes);
        if valid_len < bytes.len() {
            file.set_len(valid_len as u64).map_err(err)?;
            file.seek(SeekFrom::End(0)).map_err(err)?;
        }
        Ok(Self { map: RwLock::new(map), file: Some(Mutex::new(file)), path: Some(path.to_path_buf()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        self.map.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: &str, value: &[u8]) -> Result<(), CacheError> {
        if let Some(file) = &self.file {
            let mut record = Vec::with_capacity(8 + key.len() + value.len());
            record.extend_from_slice(&(key.len() as u32).to_le_bytes());
            record.extend_from_slice(key.as_bytes());
            record.extend_from_slice(&(value.len() as u32).to_le_bytes());
            record.extend_from_slice(value);
            let mut f = file.lock().unwrap();
            f.write_all(&record)
                .and_then(|_| f.flush())
                .map_err(|source| CacheError { path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(), source })?;
        }
        self.map.write().unwrap().insert(key.to_string(), value.to_vec());
        Ok(())
    }
}

/// Returns the decoded map and the byte length of the complete-record prefix.
fn decode_records(bytes: &[u8]) -> (HashMap<String, Vec<u8>>, usize) {
    let mut map = HashMap::new();
    let mut pos = 0;
    while let Some(klen) = read_u32(bytes, pos) {
        let kstart = pos + 4;
        let Some(vlen) = read_u32(bytes, kstart + klen) else { break };
        let vstart = kstart + klen + 4;
        if vstart + vlen > bytes.len() {
            break;
        }
        let Ok(key) = std::str::from_utf8(&bytes[kstart..kstart + klen]) else { break };
        map.insert(key.to_string(), bytes[vstart..vstart + vlen].to_vec());
        pos = vstart + vlen;
    }
    (map, pos)
}

fn read_u32(bytes: &[u8], at: usize) -> Option<usize> {
    bytes.get(at..at.checked_add(4)?).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
}
