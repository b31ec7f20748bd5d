//! Aligned sentence-embedding sets and their concatenation.
//!
//! Every set carries the id of the corpus it embeds (a SHA-256 over the raw
//! sentence lines, in order), so sets built from different or reordered
//! corpora can never be combined.

mod cache;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::multitask::{private_role, EncoderBundle};
use crate::tensor::Tensor;
use crate::text::{tokenize, EmbeddingTable, Vocab};

pub use cache::{
    load_contextual, load_embeddings, load_external, read_embeddings, save_contextual, save_embeddings, save_embeddings_with, sidecar_path,
    write_embeddings, CONTEXTUAL_MAGIC, EMBEDDING_MAGIC,
};

pub type CorpusId = [u8; 32];

/// Order-sensitive hash of the sentence lines. Each line is length-prefixed,
/// so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn corpus_id<S: AsRef<str>>(lines: &[S]) -> CorpusId {
    let mut h = Sha256::new();
    h.update((lines.len() as u64).to_le_bytes());
    for line in lines {
        let b = line.as_ref().as_bytes();
        h.update((b.len() as u64).to_le_bytes());
        h.update(b);
    }
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub corpus_id: CorpusId,
    /// One row per corpus sentence.
    pub matrix: Tensor,
    /// e.g. `mtl:shared`, `external:gensen`, `contextual:avg`.
    pub provenance: String,
}

fn check_finite(matrix: &Tensor) -> Result<()> {
    for i in 0..matrix.rows() {
        if let Some(j) = matrix.row(i).iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("row {i}, column {j}: non-finite entry")));
        }
    }
    Ok(())
}

impl EmbeddingSet {
    pub fn new(corpus_id: CorpusId, matrix: Tensor, provenance: impl Into<String>) -> Result<Self> {
        if matrix.ndim() != 2 {
            return Err(Error::invalid(format!("embedding matrix must be 2-D, got {:?}", matrix.shape())));
        }
        check_finite(&matrix)?;
        Ok(Self {
            corpus_id,
            matrix,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn corpus_hex(&self) -> String {
        hex::encode(self.corpus_id)
    }

    /// Columns `start..end` as a set with the same corpus and provenance.
    pub fn segment(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.dim() {
            return Err(Error::invalid(format!("segment {start}..{end} out of {} columns", self.dim())));
        }
        Ok(Self {
            corpus_id: self.corpus_id,
            matrix: self.matrix.slice_cols(start, end),
            provenance: self.provenance.clone(),
        })
    }

    /// Every row scaled to unit L2 norm; all-zero rows are left as they are.
    pub fn l2_normalized(&self) -> Self {
        let d = self.dim();
        let mut data = self.matrix.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Self {
            corpus_id: self.corpus_id,
            matrix: Tensor::matrix(self.len(), d, data).expect("same shape"),
            provenance: self.provenance.clone(),
        }
    }
}

/// Row-wise concatenation in the given order. With `normalize`, each input
/// is L2-normalized per row before concatenation.
pub fn combine(sets: &[EmbeddingSet], normalize: bool) -> Result<EmbeddingSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("combine needs at least one embedding set"))?;
    for s in &sets[1..] {
        if s.corpus_id != first.corpus_id {
            return Err(Error::Alignment(format!(
                "{} embeds corpus {} but {} embeds corpus {}",
                s.provenance,
                s.corpus_hex(),
                first.provenance,
                first.corpus_hex()
            )));
        }
        if s.len() != first.len() {
            return Err(Error::Alignment(format!(
                "{} has {} rows, {} has {}",
                s.provenance,
                s.len(),
                first.provenance,
                first.len()
            )));
        }
    }
    let parts: Vec<EmbeddingSet> = if normalize {
        sets.iter().map(EmbeddingSet::l2_normalized).collect()
    } else {
        sets.to_vec()
    };
    let n = first.len();
    let dim: usize = parts.iter().map(EmbeddingSet::dim).sum();
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        for p in &parts {
            data.extend_from_slice(p.matrix.row(i));
        }
    }
    let provenance = parts.iter().map(|p| p.provenance.as_str()).collect::<Vec<_>>().join("+");
    EmbeddingSet::new(first.corpus_id, Tensor::matrix(n, dim, data)?, provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "max")]
    Max,
}

impl Pooling {
    fn tag(self) -> &'static str {
        match self {
            Pooling::Average => "avg",
            Pooling::Max => "max",
        }
    }
}

/// Mean over the rows of a `T×d` matrix of contextual word vectors.
pub fn avg_pool_contextual(words: &Tensor) -> Result<Vec<f64>> {
    pool_rows(words, Pooling::Average)
}

pub fn max_pool_contextual(words: &Tensor) -> Result<Vec<f64>> {
    pool_rows(words, Pooling::Max)
}

fn pool_rows(words: &Tensor, pooling: Pooling) -> Result<Vec<f64>> {
    if words.ndim() != 2 || words.rows() == 0 {
        return Err(Error::invalid("contextual pooling needs at least one word vector"));
    }
    let t = words.rows();
    let mut out = words.row(0).to_vec();
    for i in 1..t {
        for (o, v) in out.iter_mut().zip(words.row(i)) {
            match pooling {
                Pooling::Average => *o += v,
                Pooling::Max => *o = o.max(*v),
            }
        }
    }
    if pooling == Pooling::Average {
        out.iter_mut().for_each(|o| *o /= t as f64);
    }
    Ok(out)
}

/// Precomputed per-token vectors for every sentence of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualVectors {
    pub corpus_id: CorpusId,
    pub dim: usize,
    /// `T_i × dim` per sentence.
    pub sentences: Vec<Tensor>,
    pub provenance: String,
}

impl ContextualVectors {
    pub fn new(corpus_id: CorpusId, dim: usize, sentences: Vec<Tensor>, provenance: impl Into<String>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if s.ndim() != 2 || s.cols() != dim || s.rows() == 0 {
                return Err(Error::invalid(format!(
                    "sentence {i}: expected T×{dim} with T >= 1, got {:?}",
                    s.shape()
                )));
            }
            check_finite(s).map_err(|e| Error::Numeric(format!("sentence {i}: {e}")))?;
        }
        Ok(Self {
            corpus_id,
            dim,
            sentences,
            provenance: provenance.into(),
        })
    }

    /// One pooled row per sentence, tagged `contextual:avg` or `contextual:max`.
    pub fn pool(&self, pooling: Pooling) -> Result<EmbeddingSet> {
        let mut data = Vec::with_capacity(self.sentences.len() * self.dim);
        for s in &self.sentences {
            data.extend(pool_rows(s, pooling)?);
        }
        let m = Tensor::matrix(self.sentences.len(), self.dim, data)?;
        EmbeddingSet::new(self.corpus_id, m, format!("contextual:{}", pooling.tag()))
    }
}

/// Which encoders of a bundle embed the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Shared,
    Private(String),
    /// Shared then every private encoder, in manifest order.
    ConcatAll,
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(EmbedMode::Shared),
            "concat_all" => Ok(EmbedMode::ConcatAll),
            _ => match s.strip_prefix("private:") {
                Some(task) if !task.is_empty() => Ok(EmbedMode::Private(task.to_string())),
                _ => Err(Error::config(
                    "mode",
                    format!("expected shared, private:<task> or concat_all, got {s:?}"),
                )),
            },
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedMode::Shared => f.write_str("shared"),
            EmbedMode::Private(t) => write!(f, "private:{t}"),
            EmbedMode::ConcatAll => f.write_str("concat_all"),
        }
    }
}

/// Embeds raw sentence lines (whitespace-tokenized) with the encoders
/// selected by `mode`.
pub fn embed_corpus(
    bundle: &EncoderBundle,
    lines: &[String],
    vocab: &Vocab,
    table: &EmbeddingTable,
    mode: &EmbedMode,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    let encoders: Vec<&EncoderParams> = match mode {
        EmbedMode::Shared => vec![bundle
            .get("shared")
            .ok_or_else(|| Error::Format("bundle has no shared encoder".into()))?],
        EmbedMode::Private(task) => vec![bundle
            .get(&private_role(task))
            .ok_or_else(|| Error::config("mode", format!("bundle has no private encoder for task {task:?}")))?],
        EmbedMode::ConcatAll => bundle.encoders.iter().map(|(_, p)| p).collect(),
    };
    let tokens: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
    let id = corpus_id(lines);
    let mut sets = Vec::with_capacity(encoders.len());
    for p in encoders {
        sets.push(EmbeddingSet::new(id, p.embed_sentences(&tokens, vocab, table, batch_size)?, "")?);
    }
    let mut out = combine(&sets, false)?;
    out.provenance = format!("mtl:{mode}");
    Ok(out)
}

#[cfg(test)]
mod tests;
