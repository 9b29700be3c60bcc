//! Semantic knowledge database: textual scene descriptions with unit-norm
//! embeddings, exact top-k cosine retrieval, and the `RSDB` file format.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! "RSDB" | version: u16 | dim: u32 | count: u64
//! count × ( id: u64 | text_len: u32 | text: UTF-8 bytes | dim × f32 )
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::l2_norm;

pub const RSDB_MAGIC: &[u8; 4] = b"RSDB";
pub const RSDB_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticRecord {
    pub id: u64,
    pub text: String,
    /// Unit-norm embedding, stored at the on-disk precision.
    pub embedding: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticDatabase {
    dim: usize,
    records: Vec<SemanticRecord>,
}

/// One line of the JSONL ingestion format.
#[derive(Debug, Deserialize, Serialize)]
pub struct IngestLine {
    pub text: String,
    pub embedding: Vec<f64>,
}

impl SemanticDatabase {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SemanticRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&SemanticRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Normalizes `embedding` and appends a record; returns its id.
    pub fn ingest(&mut self, text: &str, embedding: &[f64]) -> Result<u64> {
        if text.is_empty() {
            return Err(Error::InvalidInput("description text is empty".into()));
        }
        if embedding.len() != self.dim {
            return Err(Error::shape("ingest", (1, self.dim), (1, embedding.len())));
        }
        let norm = l2_norm(embedding);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Domain("embedding must be a finite nonzero vector".into()));
        }
        let id = self.records.last().map_or(0, |r| r.id + 1);
        self.records.push(SemanticRecord {
            id,
            text: text.to_string(),
            embedding: embedding.iter().map(|v| (v / norm) as f32).collect(),
        });
        Ok(id)
    }

    /// Ingests `{"text", "embedding"}` lines; blank lines are skipped.
    pub fn ingest_jsonl(&mut self, reader: impl BufRead) -> Result<usize> {
        let mut added = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: IngestLine = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", n + 1)))?;
            self.ingest(&parsed.text, &parsed.embedding)
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", n + 1)))?;
            added += 1;
        }
        Ok(added)
    }

    /// Exact top-k by cosine similarity. Results are ordered by descending
    /// score, ties by ascending id.
    pub fn retrieve_top_k(&self, query: &[f64], k: usize) -> Result<Vec<RetrievalResult>> {
        if query.len() != self.dim {
            return Err(Error::shape("retrieve_top_k", (1, self.dim), (1, query.len())));
        }
        let norm = l2_norm(query);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Domain("query must be a finite nonzero vector".into()));
        }
        if k == 0 || self.records.is_empty() {
            return Ok(Vec::new());
        }
        let unit: Vec<f64> = query.iter().map(|v| v / norm).collect();

        // Max-heap on "worseness": the top is the weakest kept candidate.
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        for r in &self.records {
            let candidate = Ranked(RetrievalResult {
                id: r.id,
                score: score(&r.embedding, &unit),
            });
            if heap.len() < k {
                heap.push(candidate);
            } else if let Some(worst) = heap.peek() {
                if candidate < *worst {
                    heap.pop();
                    heap.push(candidate);
                }
            }
        }
        Ok(heap.into_sorted_vec().into_iter().map(|r| r.0).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RSDB_MAGIC);
        out.extend_from_slice(&RSDB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.extend_from_slice(&(r.text.len() as u32).to_le_bytes());
            out.extend_from_slice(r.text.as_bytes());
            for v in &r.embedding {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4, "magic")?;
        if magic != RSDB_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"RSDB\"")));
        }
        let version = cur.u16("version")?;
        if version != RSDB_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version}, expected {RSDB_VERSION}"),
            ));
        }
        let dim = cur.u32("dim")? as usize;
        let count_offset = cur.offset();
        let count = cur.u64("record count")?;
        if count > 0 && dim == 0 {
            return Err(Error::format(6, "dim is 0 but the database has records"));
        }
        let min_record = 8 + 4 + 4 * dim as u64;
        if count.saturating_mul(min_record) > cur.remaining() as u64 {
            return Err(Error::format(
                count_offset,
                format!("record count {count} exceeds the remaining payload"),
            ));
        }
        let mut records = Vec::with_capacity(count as usize);
        let mut prev: Option<u64> = None;
        for _ in 0..count {
            let id_offset = cur.offset();
            let id = cur.u64("record id")?;
            if prev.is_some_and(|p| id <= p) {
                return Err(Error::format(id_offset, format!("record id {id} is not increasing")));
            }
            prev = Some(id);
            let len = cur.u32("text length")? as usize;
            let text_offset = cur.offset();
            let text = std::str::from_utf8(cur.take(len, "text")?)
                .map_err(|e| Error::format(text_offset, format!("text is not UTF-8: {e}")))?
                .to_string();
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                embedding.push(cur.f32("embedding")?);
            }
            records.push(SemanticRecord { id, text, embedding });
        }
        if cur.remaining() != 0 {
            return Err(Error::format(
                cur.offset(),
                format!("{} trailing bytes after the last record", cur.remaining()),
            ));
        }
        Ok(Self { dim, records })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Cosine against a unit query; stored embeddings are unit-norm.
fn score(embedding: &[f32], unit_query: &[f64]) -> f64 {
    embedding
        .iter()
        .zip(unit_query)
        .map(|(&e, q)| e as f64 * q)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// Orders results best-first: higher score, then lower id.
#[derive(Debug)]
struct Ranked(RetrievalResult);

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .score
            .total_cmp(&self.0.score)
            .then(self.0.id.cmp(&other.0.id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

/// Little-endian reader that reports the offset of any short read.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
