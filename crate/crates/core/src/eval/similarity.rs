use std::collections::BTreeMap;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::classifier::{penalized, Adam, ClassifierConfig, Standardizer};
use super::{pair_matrix, EvalReport, MetricKind};
use crate::error::{Error, Result};
use crate::multitask::Mlp;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("pearson over {} and {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("pearson: zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Correlate gold scores with the cosine of the two embeddings.
    #[default]
    Cosine,
    /// Fit a ridge regressor on pair features, correlate its predictions.
    Trained,
}

/// Aligned sentence embeddings with gold similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSplit {
    pub a: Tensor,
    pub b: Tensor,
    pub gold: Vec<f64>,
}

impl ScoredSplit {
    pub fn new(a: Tensor, b: Tensor, gold: Vec<f64>) -> Result<Self> {
        if a.shape() != b.shape() || a.rows() != gold.len() {
            return Err(Error::Alignment(format!(
                "similarity split: {:?} vs {:?} with {} scores",
                a.shape(),
                b.shape(),
                gold.len()
            )));
        }
        Ok(Self { a, b, gold })
    }

    fn cosines(&self) -> Result<Vec<f64>> {
        (0..self.a.rows()).map(|i| cosine(self.a.row(i), self.b.row(i))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityData {
    pub name: String,
    pub train: Option<ScoredSplit>,
    pub dev: Option<ScoredSplit>,
    pub test: ScoredSplit,
}

struct Ridge {
    standardizer: Standardizer,
    head: Mlp,
}

impl Ridge {
    fn predict(&self, s: &ScoredSplit) -> Result<Vec<f64>> {
        let x = self.standardizer.apply(&pair_matrix(&s.a, &s.b)?)?;
        let mut tape = Tape::new();
        let w = tape.constant(self.head.w_out.clone());
        let b = tape.constant(self.head.b_out.clone());
        let xv = tape.constant(x);
        let z = tape.matmul(xv, w)?;
        let z = tape.add_bias(z, b)?;
        Ok(tape.value(z).data().to_vec())
    }
}

fn fit_ridge(train: &ScoredSplit, l2: f64, config: &ClassifierConfig, seed: u64) -> Result<Ridge> {
    let feats = pair_matrix(&train.a, &train.b)?;
    let standardizer = Standardizer::fit(&feats);
    let x = standardizer.apply(&feats)?;
    let n = x.rows();
    let mut head = Mlp::init(x.cols(), 0, 1, &mut Rng::seed_from_u64(seed));
    let target = Tensor::matrix(n, 1, train.gold.clone())?;
    let mut adam = Adam::new(&head.tensors(), config.learning_rate);
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let w = tape.param(&head.w_out);
        let b = tape.param(&head.b_out);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(target.clone());
        let z = tape.matmul(xv, w)?;
        let z = tape.add_bias(z, b)?;
        let err = tape.sub(z, yv)?;
        let sq = tape.frobenius_sq(err)?;
        let mse = tape.scale(sq, 1.0 / n as f64);
        let loss = penalized(&mut tape, mse, &[w], l2)?;
        let grads = tape.backward(loss)?;
        let g = [grads.get(w).expect("param"), grads.get(b).expect("param")];
        adam.step(head.tensors_mut(), &g);
    }
    Ok(Ridge { standardizer, head })
}

/// Pearson correlation with gold scores on the test split (and on dev when
/// present). Trained mode selects the ridge strength on dev.
pub fn similarity_eval(data: &SimilarityData, mode: SimilarityMode, config: &ClassifierConfig, seed: u64) -> Result<EvalReport> {
    let mut hp = BTreeMap::new();
    let (dev, test) = match mode {
        SimilarityMode::Cosine => {
            let dev = match &data.dev {
                Some(d) => Some(pearson(&d.cosines()?, &d.gold)?),
                None => None,
            };
            (dev, pearson(&data.test.cosines()?, &data.test.gold)?)
        }
        SimilarityMode::Trained => {
            config.validate()?;
            let (train, dev) = match (&data.train, &data.dev) {
                (Some(t), Some(d)) => (t, d),
                _ => return Err(Error::invalid("trained similarity needs train and dev splits")),
            };
            let mut best: Option<(Ridge, f64, f64)> = None;
            for &l2 in &config.l2_grid {
                let model = fit_ridge(train, l2, config, seed)?;
                let r = pearson(&model.predict(dev)?, &dev.gold)?;
                if best.as_ref().is_none_or(|(_, b, _)| r > *b) {
                    best = Some((model, r, l2));
                }
            }
            let (model, dev_r, l2) = best.expect("non-empty grid");
            hp.insert("l2".to_string(), l2);
            (Some(dev_r), pearson(&model.predict(&data.test)?, &data.test.gold)?)
        }
    };
    Ok(EvalReport {
        task: data.name.clone(),
        metric: MetricKind::Pearson,
        dev,
        test,
        dev_f1: None,
        test_f1: None,
        hyperparameters: hp,
        seed,
        config_hash: None,
    })
}
