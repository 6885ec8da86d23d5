//! Exact cosine-similarity nearest-neighbor retrieval over precomputed
//! sentence embeddings.
//!
//! The index is an exhaustive scan. Ranking is by descending cosine
//! similarity, with equal similarities ordered by ascending instance id so
//! that every query has exactly one correct answer.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"AICLEMB1";
const MAGIC_PREFIX: &[u8; 7] = b"AICLEMB";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch for {0:?}")]
    DimensionMismatch(String),
    #[error("corrupt embedding file at byte offset {0}")]
    CorruptFile(usize),
    #[error("unknown embedding file version")]
    UnknownVersion,
    #[error("vector for {0:?} is all zeros")]
    ZeroVector(String),
    #[error("vector for {0:?} has a non-finite entry")]
    NonFinite(String),
    #[error("duplicate id {0:?} in embedding set")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("no embedding for id {0:?}")]
    MissingId(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A fixed-length sentence embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        if values.is_empty() {
            return Err(IndexError::InvalidArgument("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(String::new()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Cosine similarity `dot(a, b) / (|a| |b|)`, accumulated in f64.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch(format!("{} vs {}", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector(String::new()));
    }
    Ok(dot(&a.0, &b.0) / (na * nb))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Top-M training neighbors of a query, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub query_id: String,
    pub entries: Vec<Neighbor>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` most similar neighbors.
    pub fn prefix(&self, k: usize) -> &[Neighbor] {
        &self.entries[..k.min(self.entries.len())]
    }
}

fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.partial_cmp(&a.similarity).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone)]
struct Entry {
    id: String,
    vector: EmbeddingVector,
    norm: f64,
}

/// Immutable id → embedding store answering exact top-M cosine queries.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    entries: Vec<Entry>,
    by_id: HashMap<String, usize>,
    dim: usize,
}

impl EmbeddingIndex {
    pub fn from_pairs<I>(pairs: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        let mut index = EmbeddingIndex::default();
        for (id, vector) in pairs {
            index.push(id, vector)?;
        }
        Ok(index)
    }

    fn push(&mut self, id: String, vector: EmbeddingVector) -> Result<(), IndexError> {
        if self.entries.is_empty() {
            self.dim = vector.dim();
        } else if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch(id));
        }
        let norm = vector.norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroVector(id));
        }
        if self.by_id.insert(id.clone(), self.entries.len()).is_some() {
            return Err(IndexError::DuplicateId(id));
        }
        self.entries.push(Entry { id, vector, norm });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.by_id.get(id).map(|&i| &self.entries[i].vector)
    }

    pub fn require(&self, id: &str) -> Result<&EmbeddingVector, IndexError> {
        self.get(id).ok_or_else(|| IndexError::MissingId(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|e| (e.id.as_str(), &e.vector))
    }

    /// A new index restricted to `ids`, in the given order.
    pub fn subset<'a, I>(&self, ids: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::from_pairs(ids.into_iter().map(|id| Ok((id.to_string(), self.require(id)?.clone()))).collect::<Result<Vec<_>, IndexError>>()?)
    }

    pub fn top_m(&self, query: &EmbeddingVector, m: usize, exclude: Option<&str>) -> Result<Neighborhood, IndexError> {
        self.top_m_for("", query, m, exclude)
    }

    /// Like [`top_m`](Self::top_m), tagging the result with `query_id`.
    pub fn top_m_for(&self, query_id: &str, query: &EmbeddingVector, m: usize, exclude: Option<&str>) -> Result<Neighborhood, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if m == 0 {
            return Err(IndexError::InvalidArgument("m must be at least 1".into()));
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch(query_id.to_string()));
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroVector(query_id.to_string()));
        }
        let mut scored: Vec<Neighbor> = self
            .entries
            .iter()
            .filter(|e| Some(e.id.as_str()) != exclude)
            .map(|e| Neighbor { id: e.id.clone(), similarity: dot(&query.0, &e.vector.0) / (qn * e.norm) })
            .collect();
        if m < scored.len() {
            scored.select_nth_unstable_by(m - 1, rank_order);
            scored.truncate(m);
        }
        scored.sort_by(rank_order);
        Ok(Neighborhood { query_id: query_id.to_string(), entries: scored })
    }

    /// Neighborhood of a stored instance, never containing the instance itself.
    pub fn neighbors_of(&self, id: &str, vector: &EmbeddingVector, m: usize) -> Result<Neighborhood, IndexError> {
        self.top_m_for(id, vector, m, Some(id))
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io { path: path.display().to_string(), source })?;
        if bytes.starts_with(EMBEDDING_MAGIC) {
            Self::decode_binary(&bytes)
        } else if bytes.starts_with(MAGIC_PREFIX) {
            Err(IndexError::UnknownVersion)
        } else {
            Self::decode_jsonl(&bytes)
        }
    }

    pub fn decode_binary(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != EMBEDDING_MAGIC {
            return Err(IndexError::UnknownVersion);
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut index = EmbeddingIndex::default();
        for _ in 0..count {
            let start = r.pos;
            let id_len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?).map_err(|_| IndexError::CorruptFile(start))?.to_string();
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            let vector = EmbeddingVector::new(values).map_err(|e| match e {
                IndexError::NonFinite(_) => IndexError::NonFinite(id.clone()),
                _ => IndexError::CorruptFile(start),
            })?;
            index.push(id, vector)?;
        }
        if r.pos != bytes.len() {
            return Err(IndexError::CorruptFile(r.pos));
        }
        Ok(index)
    }

    fn decode_jsonl(bytes: &[u8]) -> Result<Self, IndexError> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            vector: Vec<f32>,
        }
        let mut index = EmbeddingIndex::default();
        let mut offset = 0;
        for line in BufReader::new(bytes).split(b'\n') {
            let line = line.map_err(|_| IndexError::CorruptFile(offset))?;
            let len = line.len() + 1;
            if !line.iter().all(u8::is_ascii_whitespace) {
                let rec: Line = serde_json::from_slice(&line).map_err(|_| IndexError::CorruptFile(offset))?;
                let vector = EmbeddingVector::new(rec.vector).map_err(|e| match e {
                    IndexError::NonFinite(_) => IndexError::NonFinite(rec.id.clone()),
                    _ => IndexError::CorruptFile(offset),
                })?;
                index.push(rec.id, vector)?;
            }
            offset += len;
        }
        Ok(index)
    }

    pub fn encode_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * (2 + 8 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u16).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            for v in &e.vector.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        if let Some(e) = self.entries.iter().find(|e| e.id.len() > u16::MAX as usize) {
            return Err(IndexError::InvalidArgument(format!("id too long: {:?}", e.id)));
        }
        let io = |source| IndexError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.encode_binary()).map_err(io)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(IndexError::CorruptFile(self.pos)),
        }
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
