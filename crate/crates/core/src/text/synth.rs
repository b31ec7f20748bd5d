//! Seeded marker-token classification tasks.
//!
//! Every generated sentence is filler words plus exactly two marker slots: a
//! generic slot (tokens `gen<c>` / `gen_none`, shared by every task) and a
//! private slot (tokens `<task>_m<c>` / `<task>_none`, unique to the task).
//! Exactly one slot carries the label; which one is drawn per sentence with
//! probability proportional to the shared and private signal weights, and
//! the other slot holds its neutral token. Reading whichever slot is not
//! neutral recovers the label, so the Bayes-optimal labeler is exact.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::dataset::DatasetRecord;
use super::vocab::{EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const GENERIC_NONE: &str = "gen_none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthVocab {
    /// Number of distinct filler words shared by all tasks.
    pub filler: usize,
    pub min_fill: usize,
    pub max_fill: usize,
}

impl Default for SynthVocab {
    fn default() -> Self {
        Self {
            filler: 30,
            min_fill: 3,
            max_fill: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Namespace of the private markers; distinct tasks get disjoint markers.
    pub task: String,
    pub num_classes: usize,
    pub n: usize,
    pub shared_signal_weight: f64,
    pub private_signal_weight: f64,
    #[serde(default)]
    pub vocab: SynthVocab,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task.is_empty() || self.task.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
            return Err(Error::config("task", "must be non-empty lowercase without whitespace"));
        }
        if self.task == "gen" || self.task == "w" {
            return Err(Error::config("task", "name collides with generic or filler tokens"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        let (ws, wp) = (self.shared_signal_weight, self.private_signal_weight);
        if !(ws >= 0.0 && wp >= 0.0 && ws.is_finite() && wp.is_finite()) {
            return Err(Error::config("signal weights", "must be finite and non-negative"));
        }
        if ws + wp == 0.0 {
            return Err(Error::config("signal weights", "total signal weight is zero"));
        }
        let v = &self.vocab;
        if v.filler == 0 || v.min_fill > v.max_fill {
            return Err(Error::config("vocab", "need filler >= 1 and min_fill <= max_fill"));
        }
        Ok(())
    }

    pub fn generic_marker(c: usize) -> String {
        format!("gen{c}")
    }

    pub fn private_marker(&self, c: usize) -> String {
        format!("{}_m{c}", self.task)
    }

    pub fn private_none(&self) -> String {
        format!("{}_none", self.task)
    }

    pub fn filler(i: usize) -> String {
        format!("w{i}")
    }

    /// Private marker tokens including the neutral one.
    pub fn private_markers(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.num_classes).map(|c| self.private_marker(c)).collect();
        v.push(self.private_none());
        v
    }

    pub fn generic_markers(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.num_classes).map(Self::generic_marker).collect();
        v.push(GENERIC_NONE.to_string());
        v
    }

    /// Every token this task can emit.
    pub fn tokens(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.vocab.filler).map(Self::filler).collect();
        v.extend(self.generic_markers());
        v.extend(self.private_markers());
        v
    }

    /// Bayes-optimal label: the class of whichever marker slot is not neutral.
    pub fn oracle_label(&self, tokens: &[String]) -> Option<usize> {
        tokens
            .iter()
            .find_map(|t| (0..self.num_classes).find(|&c| *t == Self::generic_marker(c) || *t == self.private_marker(c)))
    }

    /// Label readable from the generic slot alone, if it carries one.
    pub fn generic_label(&self, tokens: &[String]) -> Option<usize> {
        tokens
            .iter()
            .find_map(|t| (0..self.num_classes).find(|&c| *t == Self::generic_marker(c)))
    }
}

pub fn synth_task(seed: u64, spec: &SynthSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let p_generic = spec.shared_signal_weight / (spec.shared_signal_weight + spec.private_signal_weight);
    let v = &spec.vocab;
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let label = rng.gen_range(0..spec.num_classes);
        let generic_carries = rng.gen::<f64>() < p_generic;
        let fill = rng.gen_range(v.min_fill..=v.max_fill);
        let mut tokens: Vec<String> = (0..fill).map(|_| SynthSpec::filler(rng.gen_range(0..v.filler))).collect();
        let (generic, private) = if generic_carries {
            (SynthSpec::generic_marker(label), spec.private_none())
        } else {
            (GENERIC_NONE.to_string(), spec.private_marker(label))
        };
        let mut markers = [generic, private];
        markers.shuffle(&mut rng);
        for m in markers {
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, m);
        }
        out.push(DatasetRecord::single(tokens, label));
    }
    Ok(out)
}

/// Random word vectors, uniform in `[-1, 1]`, for the given tokens (in
/// order, duplicates ignored).
pub fn synth_word_vectors(seed: u64, tokens: &[String], dim: usize) -> Result<(Vocab, EmbeddingTable)> {
    let mut rng = Rng::seed_from_u64(seed);
    let pairs: Vec<(String, Vec<f64>)> = tokens
        .iter()
        .map(|t| (t.clone(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    EmbeddingTable::from_pairs(&pairs, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(task: &str, ws: f64, wp: f64) -> SynthSpec {
        SynthSpec {
            task: task.into(),
            num_classes: 3,
            n: 500,
            shared_signal_weight: ws,
            private_signal_weight: wp,
            vocab: SynthVocab::default(),
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let s = spec("a", 1.0, 1.0);
        assert_eq!(synth_task(11, &s).unwrap(), synth_task(11, &s).unwrap());
        assert_ne!(synth_task(11, &s).unwrap(), synth_task(12, &s).unwrap());
    }

    #[test]
    fn bayes_rule_is_exact() {
        let s = spec("a", 1.0, 2.0);
        let data = synth_task(3, &s).unwrap();
        let correct = data.iter().filter(|r| s.oracle_label(&r.sentence1) == r.label()).count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
        assert_eq!(correct, data.len());
    }

    #[test]
    fn no_private_signal_means_generic_markers_suffice() {
        let s = spec("a", 1.0, 0.0);
        let data = synth_task(5, &s).unwrap();
        let correct = data.iter().filter(|r| s.generic_label(&r.sentence1) == r.label()).count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
    }

    #[test]
    fn private_markers_are_disjoint() {
        let a: HashSet<String> = spec("a", 1.0, 1.0).private_markers().into_iter().collect();
        let b: HashSet<String> = spec("b", 1.0, 1.0).private_markers().into_iter().collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn rejects_zero_signal() {
        let s = spec("a", 0.0, 0.0);
        assert!(synth_task(1, &s).is_err());
        assert!(synth_task(1, &spec("A b", 1.0, 0.0)).is_err());
    }

    #[test]
    fn word_vectors_cover_tokens() {
        let s = spec("a", 1.0, 1.0);
        let (vocab, table) = synth_word_vectors(9, &s.tokens(), 8).unwrap();
        assert_eq!(vocab.len(), s.tokens().len() + 2);
        assert_eq!(table.dim(), 8);
        for r in synth_task(1, &s).unwrap() {
            assert!(r.sentence1.iter().all(|t| vocab.get(t).is_some()));
        }
    }
}
