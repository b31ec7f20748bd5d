use super::dataset::{DatasetRecord, Target};
use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};

/// Padded `B × T` token indices with a validity mask. `T` is the longest
/// sentence unless padded further with [`SentenceBatch::pad_to`].
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceBatch {
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl SentenceBatch {
    pub fn from_indices(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty sentence batch"));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("sentences must have at least one token"));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut batch = SentenceBatch {
            tokens: Vec::with_capacity(seqs.len()),
            mask: Vec::with_capacity(seqs.len()),
            lengths: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            let mut row = s.clone();
            row.resize(t, PAD);
            batch.mask.push((0..t).map(|i| i < s.len()).collect());
            batch.tokens.push(row);
            batch.lengths.push(s.len());
        }
        Ok(batch)
    }

    pub fn from_tokens<S: AsRef<[String]>>(sentences: &[S], vocab: &Vocab) -> Result<Self> {
        let seqs: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| s.as_ref().iter().map(|t| vocab.lookup(t)).collect())
            .collect();
        Self::from_indices(&seqs)
    }

    /// Adds pad columns up to `len` timesteps (no-op if already that long).
    pub fn pad_to(mut self, len: usize) -> Self {
        for (row, m) in self.tokens.iter_mut().zip(self.mask.iter_mut()) {
            if row.len() < len {
                row.resize(len, PAD);
                m.resize(len, false);
            }
        }
        self
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Valid positions of sentence `b` at timestep `t`, as a per-row vector.
    pub fn valid_at(&self, t: usize) -> Vec<bool> {
        self.mask.iter().map(|m| m[t]).collect()
    }

    /// Original sequences with padding stripped.
    pub fn unpad(&self) -> Vec<Vec<usize>> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .map(|(row, m)| row.iter().zip(m).filter(|(_, &v)| v).map(|(&t, _)| t).collect())
            .collect()
    }
}

/// One mini-batch of records: first sentences, optional second sentences,
/// and the targets in record order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub first: SentenceBatch,
    pub second: Option<SentenceBatch>,
    pub targets: Vec<Target>,
}

impl Batch {
    pub fn from_records(records: &[&DatasetRecord], vocab: &Vocab) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("empty record list"));
        }
        let pair = records[0].sentence2.is_some();
        if records.iter().any(|r| r.sentence2.is_some() != pair) {
            return Err(Error::invalid("batch mixes single-sentence and pair records"));
        }
        let s1: Vec<&[String]> = records.iter().map(|r| r.sentence1.as_slice()).collect();
        let first = SentenceBatch::from_tokens(&s1, vocab)?;
        let second = if pair {
            let s2: Vec<&[String]> = records.iter().map(|r| r.sentence2.as_deref().unwrap_or(&[])).collect();
            Some(SentenceBatch::from_tokens(&s2, vocab)?)
        } else {
            None
        };
        Ok(Batch {
            first,
            second,
            targets: records.iter().map(|r| r.target.clone()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.first.size()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.targets
            .iter()
            .map(|t| match t {
                Target::Label(l) => Ok(*l),
                Target::Score(_) => Err(Error::invalid("expected class labels, found scores")),
            })
            .collect()
    }
}

/// Splits `records` (in the given order) into consecutive batches of
/// `batch_size`; the last batch may be short.
pub fn batch(records: &[DatasetRecord], batch_size: usize, vocab: &Vocab) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if records.is_empty() {
        return Err(Error::invalid("empty record list"));
    }
    records
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&DatasetRecord> = chunk.iter().collect();
            Batch::from_records(&refs, vocab)
        })
        .collect()
}
