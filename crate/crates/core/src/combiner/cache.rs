//! Binary embedding cache and contextual-vector files.
//!
//! Layout (little-endian): magic (4 bytes), version u32, corpus id (32
//! bytes), n u64, dim u32, provenance length u32 + UTF-8 bytes, then the
//! payload. Embedding caches store n×dim f64 values; contextual files store,
//! per sentence, T_i u32 followed by T_i×dim f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ContextualVectors, CorpusId, EmbeddingSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SEMB";
pub const CONTEXTUAL_MAGIC: &[u8; 4] = b"SCTX";
const VERSION: u32 = 1;

struct Header {
    corpus_id: CorpusId,
    n: usize,
    dim: usize,
    provenance: String,
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], h: &Header) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.corpus_id);
    out.extend_from_slice(&(h.n as u64).to_le_bytes());
    out.extend_from_slice(&(h.dim as u32).to_le_bytes());
    out.extend_from_slice(&(h.provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(h.provenance.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(k).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated file while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            count.checked_mul(8).ok_or_else(|| Error::Format("payload size overflow".into()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

fn read_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<Header> {
    if r.take(4, "magic")? != magic {
        return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let corpus_id: CorpusId = r.take(32, "corpus id")?.try_into().expect("32 bytes");
    let n = usize::try_from(r.u64("row count")?).map_err(|_| Error::Format("row count too large".into()))?;
    let dim = r.u32("dimension")? as usize;
    let len = r.u32("provenance length")? as usize;
    let provenance = String::from_utf8(r.take(len, "provenance")?.to_vec()).map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
    Ok(Header {
        corpus_id,
        n,
        dim,
        provenance,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Numeric(m) => Error::Numeric(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + set.matrix.len() * 8);
    write_header(
        &mut out,
        EMBEDDING_MAGIC,
        &Header {
            corpus_id: set.corpus_id,
            n: set.len(),
            dim: set.dim(),
            provenance: set.provenance.clone(),
        },
    );
    for v in set.matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader { bytes, at: 0 };
    let h = read_header(&mut r, EMBEDDING_MAGIC)?;
    let have = r.remaining();
    let row_bytes = h.dim * 8;
    if row_bytes == 0 || !have.is_multiple_of(row_bytes) || have / row_bytes != h.n {
        let rows = have.checked_div(row_bytes).unwrap_or(0);
        return Err(Error::Format(format!(
            "header declares {} rows of dimension {} but the payload holds {rows} rows ({have} bytes)",
            h.n, h.dim
        )));
    }
    let data = r.f64s(h.n * h.dim, "rows")?;
    EmbeddingSet::new(h.corpus_id, Tensor::matrix(h.n, h.dim, data)?, h.provenance)
}

/// `<path>.json`, the human-readable mirror written next to each cache.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    version: u32,
    corpus_id: String,
    n: usize,
    dim: usize,
    provenance: &'a str,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
    rows: Vec<&'a [f64]>,
}

/// Writes the binary cache and its JSON sidecar.
pub fn save_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    save_embeddings_with(path, set, serde_json::Map::new())
}

/// Like [`save_embeddings`], with `extra` fields (config hash, seed) added
/// to the sidecar.
pub fn save_embeddings_with(path: &Path, set: &EmbeddingSet, extra: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    fs::write(path, write_embeddings(set)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        format: "SEMB",
        version: VERSION,
        corpus_id: set.corpus_hex(),
        n: set.len(),
        dim: set.dim(),
        provenance: &set.provenance,
        extra,
        rows: (0..set.len()).map(|i| set.matrix.row(i)).collect(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    read_embeddings(&read_file(path)?).map_err(|e| with_path(path, e))
}

/// Loads a precomputed cache from an outside encoder, tagging it
/// `external:<name>` where the name is the stored provenance.
pub fn load_external(path: &Path) -> Result<EmbeddingSet> {
    let mut set = load_embeddings(path)?;
    if !set.provenance.starts_with("external:") {
        let name = if set.provenance.is_empty() {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            set.provenance.clone()
        };
        set.provenance = format!("external:{name}");
    }
    Ok(set)
}

pub fn save_contextual(path: &Path, cv: &ContextualVectors) -> Result<()> {
    let mut out = Vec::new();
    write_header(
        &mut out,
        CONTEXTUAL_MAGIC,
        &Header {
            corpus_id: cv.corpus_id,
            n: cv.sentences.len(),
            dim: cv.dim,
            provenance: cv.provenance.clone(),
        },
    );
    for s in &cv.sentences {
        out.extend_from_slice(&(s.rows() as u32).to_le_bytes());
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_contextual(path: &Path) -> Result<ContextualVectors> {
    let bytes = read_file(path)?;
    let parse = || -> Result<ContextualVectors> {
        let mut r = Reader { bytes: &bytes, at: 0 };
        let h = read_header(&mut r, CONTEXTUAL_MAGIC)?;
        let mut sentences = Vec::with_capacity(h.n.min(1 << 20));
        for i in 0..h.n {
            let t = r.u32(&format!("length of sentence {i}"))? as usize;
            if t == 0 {
                return Err(Error::Format(format!("sentence {i} has no word vectors")));
            }
            let data = r.f64s(t * h.dim, &format!("sentence {i}"))?;
            sentences.push(Tensor::matrix(t, h.dim, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after {} sentences", r.remaining(), h.n)));
        }
        ContextualVectors::new(h.corpus_id, h.dim, sentences, h.provenance)
    };
    parse().map_err(|e| with_path(path, e))
}
