//! Flat in-memory vector index with exhaustive squared-L2 search.
//!
//! Rows are stored as one contiguous row-major `f32` matrix. Distances are
//! accumulated in `f64`. Hits are ordered by ascending distance, ties by
//! ascending row id.
//!
//! On disk an index is two files: `index.bin` (little-endian `u64` dim,
//! `u64` count, then `count * dim` little-endian `f32`) and
//! `index.meta.jsonl` (one metadata object per row, in row order).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DIM: usize = 384;
pub const INDEX_FILE: &str = "index.bin";
pub const META_FILE: &str = "index.meta.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("row {row}: expected dimension {expected}, got {got}")]
    DimensionMismatch { row: usize, expected: usize, got: usize },
    #[error("query has dimension {got}, index has {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("row {0}: vector contains a non-finite value")]
    NonFinite(usize),
    #[error("index has no rows")]
    EmptyIndex,
    #[error("k = {k} exceeds the {rows} indexed rows")]
    KTooLarge { k: usize, rows: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Per-row payload: the source encounter and its formatted claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMetadata {
    pub encounter_id: String,
    pub claim_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    data: Vec<f32>,
    metadata: Vec<IndexMetadata>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit<'a> {
    pub row: usize,
    /// Squared Euclidean distance.
    pub distance: f64,
    pub metadata: &'a IndexMetadata,
}

fn check_row(row: usize, v: &[f32], dim: usize) -> Result<(), IndexError> {
    if v.len() != dim {
        return Err(IndexError::DimensionMismatch {
            row,
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(IndexError::NonFinite(row));
    }
    Ok(())
}

impl VectorIndex {
    /// Builds an index; row ids follow insertion order.
    pub fn build(rows: Vec<(Vec<f32>, IndexMetadata)>, dim: usize) -> Result<Self, IndexError> {
        if rows.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut metadata = Vec::with_capacity(rows.len());
        for (i, (v, meta)) in rows.into_iter().enumerate() {
            check_row(i, &v, dim)?;
            data.extend_from_slice(&v);
            metadata.push(meta);
        }
        Ok(VectorIndex { dim, data, metadata })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.metadata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.is_empty()
    }

    pub fn metadata(&self, row: usize) -> &IndexMetadata {
        &self.metadata[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Exact k-nearest rows by full scan.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit<'_>>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::QueryDimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if k > self.len() {
            return Err(IndexError::KTooLarge { k, rows: self.len() });
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (row, v) in self.data.chunks_exact(self.dim).enumerate() {
            let d = squared_l2(query, v);
            // Strict comparison keeps the earlier row on exact ties.
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, row));
            best.truncate(k);
        }
        Ok(best
            .into_iter()
            .map(|(distance, row)| SearchHit {
                row,
                distance,
                metadata: &self.metadata[row],
            })
            .collect())
    }

    /// Searches many queries in parallel; output order follows input order.
    pub fn search_many(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<SearchHit<'_>>>, IndexError> {
        queries.par_iter().map(|q| self.search(q, k)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| IndexError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let bin = dir.join(INDEX_FILE);
        let mut w = BufWriter::new(fs::File::create(&bin).map_err(io(&bin))?);
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io(&bin))?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io(&bin))?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes()).map_err(io(&bin))?;
        }
        w.flush().map_err(io(&bin))?;

        let meta = dir.join(META_FILE);
        let mut w = BufWriter::new(fs::File::create(&meta).map_err(io(&meta))?);
        for m in &self.metadata {
            serde_json::to_writer(&mut w, m).expect("metadata serializes");
            w.write_all(b"\n").map_err(io(&meta))?;
        }
        w.flush().map_err(io(&meta))
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let bin = dir.join(INDEX_FILE);
        let io = |source| IndexError::Io {
            path: bin.clone(),
            source,
        };
        let mut r = BufReader::new(fs::File::open(&bin).map_err(io)?);
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(io)?;
        let dim = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(io)?;
        let count = u64::from_le_bytes(word) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() != count * dim * 4 {
            return Err(IndexError::Format {
                path: bin.clone(),
                line: 0,
                message: format!(
                    "header says {count} x {dim} floats but payload has {} bytes",
                    bytes.len()
                ),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let meta_path = dir.join(META_FILE);
        let file = fs::File::open(&meta_path).map_err(|source| IndexError::Io {
            path: meta_path.clone(),
            source,
        })?;
        let mut metadata = Vec::with_capacity(count);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| IndexError::Io {
                path: meta_path.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            metadata.push(serde_json::from_str(&line).map_err(|e| IndexError::Format {
                path: meta_path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        if metadata.len() != count {
            return Err(IndexError::Format {
                path: meta_path,
                line: 0,
                message: format!("{} metadata rows for {count} vectors", metadata.len()),
            });
        }
        if count == 0 {
            return Err(IndexError::EmptyIndex);
        }
        Ok(VectorIndex { dim, data, metadata })
    }
}

#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    // Four independent accumulators let the compiler vectorize the loop.
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            let d = x[j] as f64 - y[j] as f64;
            acc[j] += d * d;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = *x as f64 - *y as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// One line of an embeddings file: `{"id": "...", "vector": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, IndexError> {
    let file = fs::File::open(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IndexError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Deterministic feature-hashing embedder: signed token hashes folded into
/// `dim` buckets, L2-normalized. Serves offline smoke runs and the stub
/// embedding endpoint; it is not a semantic embedding model.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder { dim: dim.max(1) }
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for tok in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(tok.to_lowercase().as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
