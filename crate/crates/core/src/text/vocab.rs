use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index bijection with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { index, tokens }
    }

    /// Inserts a token, returning its index (existing index if already present).
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `UNK`.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Frozen `|V| × e` word-vector matrix aligned with a [`Vocab`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vectors: Tensor,
}

impl EmbeddingTable {
    /// Row count must equal the vocabulary size and the `PAD` row must be zero.
    pub fn new(vocab: &Vocab, vectors: Tensor) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.rows() != vocab.len() {
            return Err(Error::Shape {
                op: "embedding_table",
                left: vec![vocab.len()],
                right: vectors.shape().to_vec(),
            });
        }
        if vectors.row(PAD).iter().any(|&v| v != 0.0) {
            return Err(Error::invalid("PAD row of an embedding table must be zero"));
        }
        if !vectors.is_finite() {
            return Err(Error::invalid("embedding table holds non-finite entries"));
        }
        Ok(Self { vectors })
    }

    /// Builds vocab and table from `(token, vector)` pairs. `PAD` is zero and
    /// `UNK` is the mean of all supplied vectors.
    pub fn from_pairs(pairs: &[(String, Vec<f64>)], dim: usize) -> Result<(Vocab, Self)> {
        if pairs.is_empty() {
            return Err(Error::invalid("no word vectors supplied"));
        }
        let mut vocab = Vocab::new();
        let mut data = vec![0.0; 2 * dim];
        let mut mean = vec![0.0; dim];
        for (token, v) in pairs {
            if v.len() != dim {
                return Err(Error::Shape {
                    op: "word_vector",
                    left: vec![dim],
                    right: vec![v.len()],
                });
            }
            let before = vocab.len();
            if vocab.insert(token) != before {
                continue;
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
            data.extend_from_slice(v);
        }
        let n = (vocab.len() - 2) as f64;
        for (slot, m) in data[dim..2 * dim].iter_mut().zip(&mean) {
            *slot = m / n;
        }
        let vectors = Tensor::matrix(vocab.len(), dim, data)?;
        let table = Self::new(&vocab, vectors)?;
        Ok((vocab, table))
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.vectors.row(index)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }
}

/// Result of reading a word-vector text file.
#[derive(Clone, Debug)]
pub struct LoadedVectors {
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    /// Lines dropped for unparseable or non-finite numbers, or duplicate tokens.
    pub skipped: usize,
}

/// Reads the whitespace-delimited text format: one token followed by `dim`
/// decimals per line. A leading `count dim` header line (as written by
/// some tools) is tolerated.
pub fn load_word_vectors(path: impl AsRef<Path>, dim: usize) -> Result<LoadedVectors> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text, dim, path)
}

pub(crate) fn parse_word_vectors(text: &str, dim: usize, path: &Path) -> Result<LoadedVectors> {
    let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("dimension mismatch: expected {dim} values, found {}", fields.len() - 1),
            });
        }
        let values: Option<Vec<f64>> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match values {
            Some(v) if seen.insert(fields[0].to_string()) => pairs.push((fields[0].to_string(), v)),
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no valid word-vector lines".into(),
        });
    }
    let (vocab, table) = EmbeddingTable::from_pairs(&pairs, dim)?;
    Ok(LoadedVectors { vocab, table, skipped })
}

/// Writes every non-reserved row in the text format read by [`load_word_vectors`].
pub fn write_word_vectors(path: impl AsRef<Path>, vocab: &Vocab, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (i, token) in vocab.tokens().iter().enumerate().skip(2) {
        out.push_str(token);
        for v in table.row(i) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, dim: usize) -> Result<LoadedVectors> {
        parse_word_vectors(text, dim, Path::new("mem"))
    }

    #[test]
    fn two_lines_give_four_entries() {
        let lv = parse("the 1 2 3\ncat 3 4 5\n", 3).unwrap();
        assert_eq!(lv.vocab.len(), 4);
        assert_eq!(lv.table.row(PAD), &[0.0, 0.0, 0.0]);
        assert_eq!(lv.table.row(UNK), &[2.0, 3.0, 4.0]);
        assert_eq!(lv.table.row(lv.vocab.lookup("cat")), &[3.0, 4.0, 5.0]);
        assert_eq!(lv.vocab.lookup("dog"), UNK);
    }

    #[test]
    fn wrong_arity_is_an_error() {
        let err = parse("the 1 2 3\ncat 3 4\n", 3).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let lv = parse("a 1 2\nb x 2\nc nan 1\na 5 5\nd 0 1\n", 2).unwrap();
        assert_eq!(lv.skipped, 3);
        assert_eq!(lv.vocab.len(), 4);
        assert!(lv.table.vectors().is_finite());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(parse("\n\n", 2).is_err());
        assert!(parse("a x y\n", 2).is_err());
    }

    #[test]
    fn header_line_tolerated() {
        let lv = parse("2 2\na 1 2\nb 3 4\n", 2).unwrap();
        assert_eq!(lv.vocab.len(), 4);
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let lv = parse("x 0.1 -2.5\ny 1e-3 7\n", 2).unwrap();
        let p = dir.path().join("v.txt");
        write_word_vectors(&p, &lv.vocab, &lv.table).unwrap();
        let back = load_word_vectors(&p, 2).unwrap();
        assert_eq!(back.vocab, lv.vocab);
        assert_eq!(back.table, lv.table);
    }

    #[test]
    fn unreadable_file() {
        assert!(matches!(load_word_vectors("/nonexistent/vectors.txt", 3), Err(Error::Io { .. })));
    }
}
