use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column layout of a dataset TSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// `label⇥sentence`
    Single,
    /// `label⇥sentence1⇥sentence2`
    Pair,
    /// `score⇥sentence1⇥sentence2`
    PairScore,
}

impl Schema {
    fn columns(self) -> usize {
        match self {
            Schema::Single => 2,
            Schema::Pair | Schema::PairScore => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(usize),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub sentence1: Vec<String>,
    pub sentence2: Option<Vec<String>>,
    pub target: Target,
}

impl DatasetRecord {
    pub fn single(tokens: Vec<String>, label: usize) -> Self {
        Self {
            sentence1: tokens,
            sentence2: None,
            target: Target::Label(label),
        }
    }

    pub fn pair(s1: Vec<String>, s2: Vec<String>, label: usize) -> Self {
        Self {
            sentence1: s1,
            sentence2: Some(s2),
            target: Target::Label(label),
        }
    }

    pub fn label(&self) -> Option<usize> {
        match self.target {
            Target::Label(l) => Some(l),
            Target::Score(_) => None,
        }
    }

    pub fn score(&self) -> Option<f64> {
        match self.target {
            Target::Score(s) => Some(s),
            Target::Label(_) => None,
        }
    }
}

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

pub fn load_dataset(path: impl AsRef<Path>, schema: Schema) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, schema, path)
}

pub(crate) fn parse_dataset(text: &str, schema: Schema, path: &Path) -> Result<Vec<DatasetRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != schema.columns() {
            return Err(err(lineno, format!("expected {} columns, found {}", schema.columns(), cols.len())));
        }
        let target = match schema {
            Schema::Single | Schema::Pair => Target::Label(
                cols[0]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| err(lineno, format!("invalid class label `{}`", cols[0])))?,
            ),
            Schema::PairScore => {
                let s = cols[0]
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(lineno, format!("non-numeric score `{}`", cols[0])))?;
                Target::Score(s)
            }
        };
        let s1 = tokenize(cols[1]);
        if s1.is_empty() {
            return Err(err(lineno, "empty sentence".into()));
        }
        let s2 = if schema == Schema::Single {
            None
        } else {
            let s2 = tokenize(cols[2]);
            if s2.is_empty() {
                return Err(err(lineno, "empty sentence".into()));
            }
            Some(s2)
        };
        out.push(DatasetRecord {
            sentence1: s1,
            sentence2: s2,
            target,
        });
    }
    Ok(out)
}

/// Serializes records in the TSV layout matching their shape.
pub fn dataset_to_tsv(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        match r.target {
            Target::Label(l) => {
                let _ = write!(out, "{l}");
            }
            Target::Score(s) => {
                let _ = write!(out, "{s}");
            }
        }
        out.push('\t');
        out.push_str(&r.sentence1.join(" "));
        if let Some(s2) = &r.sentence2 {
            out.push('\t');
            out.push_str(&s2.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_tsv(records)).map_err(|e| Error::io(path, e))
}
