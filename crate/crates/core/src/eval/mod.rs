//! Frozen-feature evaluation: transfer classifiers, probes, similarity
//! correlation, weighted pooling over encoders, task-identity probing and
//! learning curves.

mod classifier;
mod pool;
mod similarity;

pub use classifier::{accuracy_of, f1_positive, fit_classifier, ClassifierConfig, FrozenClassifier, Standardizer, L2_GRID};
pub use pool::{weighted_pool_analysis, PoolAnalysisResult, PoolConfig};
pub use similarity::{cosine, pearson, similarity_eval, ScoredSplit, SimilarityData, SimilarityMode};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::encoder::pair_features;
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStreams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSplit {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.ndim() != 2 || x.rows() != y.len() {
            return Err(Error::invalid(format!("{} labels for a {:?} feature matrix", y.len(), x.shape())));
        }
        if !x.is_finite() {
            return Err(Error::invalid("non-finite features"));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSplit {
        LabeledSplit {
            x: self.x.gather_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Row-wise `[a, b, a - b, a ⊙ b]` of two aligned embedding matrices.
pub fn pair_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Alignment(format!(
            "pair sets have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(4 * a.len());
    for i in 0..a.rows() {
        data.extend(pair_features(a.row(i), b.row(i))?);
    }
    Tensor::matrix(a.rows(), 4 * a.cols(), data)
}

/// Frozen features with labels for train, dev and test.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTaskData {
    pub name: String,
    pub num_classes: usize,
    pub train: LabeledSplit,
    pub dev: LabeledSplit,
    pub test: LabeledSplit,
    /// Also report F1 of class 1 (binary paraphrase-style tasks).
    pub report_f1: bool,
}

impl FrozenTaskData {
    pub fn new(name: &str, num_classes: usize, train: LabeledSplit, dev: LabeledSplit, test: LabeledSplit) -> Result<Self> {
        let f = train.x.cols();
        for (split, s) in [("train", &train), ("dev", &dev), ("test", &test)] {
            if s.is_empty() {
                return Err(Error::invalid(format!("{name}: empty {split} split")));
            }
            if s.x.cols() != f {
                return Err(Error::invalid(format!(
                    "{name}: {split} has {} features, train has {f}",
                    s.x.cols()
                )));
            }
            classifier::check_labels(&s.y, s.x.rows(), num_classes)?;
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            train,
            dev,
            test,
            report_f1: false,
        })
    }

    /// Seeded class-stratified split of one labeled matrix into
    /// train/dev/test with the given train and dev fractions.
    pub fn split(name: &str, num_classes: usize, all: &LabeledSplit, train_frac: f64, dev_frac: f64, seed: u64) -> Result<Self> {
        if dev_frac <= 0.0 {
            return Err(Error::config("split", "dev fraction must be positive"));
        }
        let (tr, dv, te) = stratified_split(&all.y, num_classes, train_frac, dev_frac, seed)?;
        Self::new(name, num_classes, all.select(&tr), all.select(&dv), all.select(&te))
    }
}

/// Seeded per-class shuffle into train/dev/test index lists (each sorted).
/// `dev_frac` may be zero.
pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    train_frac: f64,
    dev_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && dev_frac >= 0.0 && train_frac + dev_frac < 1.0) {
        return Err(Error::config(
            "split",
            "fractions must be non-negative with train > 0 and a non-empty test share",
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let (mut tr, mut dv, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let a = (n as f64 * train_frac).round() as usize;
        let b = ((n as f64 * (train_frac + dev_frac)).round() as usize).max(a);
        tr.extend_from_slice(&idx[..a]);
        dv.extend_from_slice(&idx[a..b]);
        te.extend_from_slice(&idx[b..]);
    }
    for v in [&mut tr, &mut dv, &mut te] {
        v.sort_unstable();
    }
    Ok((tr, dv, te))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    AccuracyF1,
    Pearson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: MetricKind,
    pub dev: Option<f64>,
    pub test: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_f1: Option<f64>,
    pub hyperparameters: BTreeMap<String, f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

fn fit_on_grid(data: &FrozenTaskData, config: &ClassifierConfig, seed: u64) -> Result<(FrozenClassifier, f64)> {
    config.validate()?;
    let mut best: Option<(FrozenClassifier, f64)> = None;
    for &l2 in &config.l2_grid {
        let mut rng = Rng::seed_from_u64(seed);
        let clf = fit_classifier(&data.train.x, &data.train.y, data.num_classes, l2, config, &mut rng)?;
        let acc = accuracy_of(&clf.predict(&data.dev.x)?, &data.dev.y);
        if best.as_ref().is_none_or(|(_, b)| acc > *b) {
            best = Some((clf, acc));
        }
    }
    Ok(best.expect("non-empty grid"))
}

fn classification_report(data: &FrozenTaskData, config: &ClassifierConfig, seed: u64) -> Result<EvalReport> {
    let (clf, dev_acc) = fit_on_grid(data, config, seed)?;
    let dev_pred = clf.predict(&data.dev.x)?;
    let test_pred = clf.predict(&data.test.x)?;
    let mut hp = BTreeMap::new();
    hp.insert("l2".to_string(), clf.l2);
    hp.insert("hidden".to_string(), config.hidden as f64);
    hp.insert("iterations".to_string(), config.iterations as f64);
    hp.insert("learning_rate".to_string(), config.learning_rate);
    let f1 = data.report_f1 && data.num_classes == 2;
    Ok(EvalReport {
        task: data.name.clone(),
        metric: if f1 { MetricKind::AccuracyF1 } else { MetricKind::Accuracy },
        dev: Some(dev_acc),
        test: accuracy_of(&test_pred, &data.test.y),
        dev_f1: f1.then(|| f1_positive(&dev_pred, &data.dev.y)),
        test_f1: f1.then(|| f1_positive(&test_pred, &data.test.y)),
        hyperparameters: hp,
        seed,
        config_hash: None,
    })
}

/// Multinomial logistic regression with the L2 strength picked on dev.
pub fn train_logreg(data: &FrozenTaskData, config: &ClassifierConfig, seed: u64) -> Result<EvalReport> {
    let config = ClassifierConfig {
        hidden: 0,
        ..config.clone()
    };
    classification_report(data, &config, seed)
}

/// One-hidden-layer MLP probe; width 0 is logistic regression.
pub fn train_mlp_probe(data: &FrozenTaskData, hidden: usize, config: &ClassifierConfig, seed: u64) -> Result<EvalReport> {
    let config = ClassifierConfig { hidden, ..config.clone() };
    classification_report(data, &config, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub num_tasks: usize,
}

/// How well a fresh logistic regression recovers which set each row came
/// from. `sets[k]` holds embeddings of task `k`'s held-out sentences.
pub fn discriminator_probe(sets: &[&Tensor], config: &ClassifierConfig, seed: u64) -> Result<ProbeResult> {
    if sets.len() < 2 {
        return Err(Error::invalid("discriminator probe needs at least two tasks"));
    }
    let dim = sets[0].cols();
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (k, s) in sets.iter().enumerate() {
        if s.cols() != dim {
            return Err(Error::Alignment("probe sets differ in dimension".into()));
        }
        data.extend_from_slice(s.data());
        y.extend(std::iter::repeat_n(k, s.rows()));
    }
    let all = LabeledSplit::new(Tensor::matrix(y.len(), dim, data)?, y)?;
    let task = FrozenTaskData::split("task_identity", sets.len(), &all, 0.6, 0.2, seed)?;
    let report = train_logreg(&task, config, seed)?;
    let largest = sets.iter().map(|s| s.rows()).max().unwrap_or(0);
    let total: usize = sets.iter().map(|s| s.rows()).sum();
    Ok(ProbeResult {
        accuracy: report.test,
        chance: largest as f64 / total as f64,
        num_tasks: sets.len(),
    })
}

/// Seeded subsample of `size` rows whose per-class counts follow the full
/// split's proportions (largest-remainder rounding). Indices stay in their
/// original order.
pub fn stratified_subsample(labels: &[usize], num_classes: usize, size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = labels.len();
    if size > n {
        return Err(Error::invalid(format!("subsample of {size} from a split of {n}")));
    }
    if size == n {
        return Ok((0..n).collect());
    }
    let by_class: Vec<Vec<usize>> = (0..num_classes).map(|c| (0..n).filter(|&i| labels[i] == c).collect()).collect();
    let exact: Vec<f64> = by_class.iter().map(|v| v.len() as f64 * size as f64 / n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = size - counts.iter().sum::<usize>();
    for c in order {
        if left == 0 {
            break;
        }
        if counts[c] < by_class[c].len() {
            counts[c] += 1;
            left -= 1;
        }
    }
    let mut out = Vec::with_capacity(size);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(rng);
        out.extend_from_slice(&idx[..counts[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub dev: f64,
    pub test: f64,
}

/// Test accuracy of [`train_logreg`] on stratified subsamples of the
/// training split.
pub fn learning_curve(data: &FrozenTaskData, sizes: &[usize], config: &ClassifierConfig, seed: u64) -> Result<Vec<CurvePoint>> {
    let streams = SeedStreams::new(seed);
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut rng = streams.rng(&format!("curve/{size}"));
        let idx = stratified_subsample(&data.train.y, data.num_classes, size, &mut rng)?;
        let sub = FrozenTaskData {
            train: data.train.select(&idx),
            ..data.clone()
        };
        let r = train_logreg(&sub, config, seed)?;
        out.push(CurvePoint {
            size,
            dev: r.dev.unwrap_or(f64::NAN),
            test: r.test,
        });
    }
    Ok(out)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("size,dev_accuracy,test_accuracy\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.size, p.dev, p.test);
    }
    s
}

/// One row per report: task, metric, dev, test, dev_f1, test_f1.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("task,metric,dev,test,dev_f1,test_f1\n");
    for r in reports {
        let metric = match r.metric {
            MetricKind::Accuracy => "accuracy",
            MetricKind::AccuracyF1 => "accuracy_f1",
            MetricKind::Pearson => "pearson",
        };
        let _ = writeln!(
            s,
            "{},{metric},{},{},{},{}",
            r.task,
            opt(r.dev),
            r.test,
            opt(r.dev_f1),
            opt(r.test_f1)
        );
    }
    s
}

#[cfg(test)]
mod tests;
