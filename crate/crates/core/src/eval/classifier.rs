//! Softmax classifiers over frozen features, fit by full-batch Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{Mlp, MlpVars};
use crate::rng::Rng;
use crate::tensor::{argmax, Tape, Tensor, Var};

/// L2 strengths tried on dev for every classifier fit.
pub const L2_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub l2_grid: Vec<f64>,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Hidden units of the probe MLP; 0 is plain logistic regression.
    pub hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            l2_grid: L2_GRID.to_vec(),
            iterations: 300,
            learning_rate: 0.05,
            hidden: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("l2_grid", "need at least one finite, non-negative value"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Per-feature centering and scaling fit on a training matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, f) = (x.rows(), x.cols());
        let mut mean = vec![0.0; f];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                left: vec![self.mean.len()],
                right: x.shape().to_vec(),
            });
        }
        let f = self.mean.len();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Tensor::matrix(x.rows(), f, data)
    }
}

pub(crate) struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    pub(crate) fn new(shapes: &[&Tensor], lr: f64) -> Self {
        Self {
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
            lr,
        }
    }

    pub(crate) fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = B1 * *m + (1.0 - B1) * d;
                *v = B2 * *v + (1.0 - B2) * d * d;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²` over the classifier weight matrices.
pub(crate) fn penalized(tape: &mut Tape, data_loss: Var, weights: &[Var], l2: f64) -> Result<Var> {
    let mut total = data_loss;
    if l2 > 0.0 {
        for &w in weights {
            let sq = tape.frobenius_sq(w)?;
            let term = tape.scale(sq, 0.5 * l2);
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

/// Classifier fit on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenClassifier {
    pub standardizer: Standardizer,
    pub mlp: Mlp,
    pub l2: f64,
}

impl FrozenClassifier {
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let xs = self.standardizer.apply(x)?;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.mlp.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
        let vars = MlpVars::from_leaves(&leaves)?;
        let input = tape.constant(xs);
        let p = vars.forward(&mut tape, input)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }
}

pub(crate) fn check_labels(y: &[usize], rows: usize, classes: usize) -> Result<()> {
    if y.len() != rows {
        return Err(Error::invalid(format!("{} labels for {rows} rows", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Fits one classifier with a fixed L2 strength.
pub fn fit_classifier(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    l2: f64,
    config: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<FrozenClassifier> {
    check_labels(y, x.rows(), classes)?;
    let distinct = {
        let mut seen = vec![false; classes];
        y.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::invalid("training split contains a single class"));
    }
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x)?;
    let mut mlp = Mlp::init(x.cols(), config.hidden, classes, rng);
    let mut adam = Adam::new(&mlp.tensors(), config.learning_rate);
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = mlp.tensors().into_iter().map(|t| tape.param(t)).collect();
        let vars = MlpVars::from_leaves(&leaves)?;
        let input = tape.constant(xs.clone());
        let probs = vars.forward(&mut tape, input)?;
        let ce = tape.cross_entropy(probs, y)?;
        let weights: Vec<Var> = leaves.iter().step_by(2).copied().collect();
        let loss = penalized(&mut tape, ce, &weights, l2)?;
        let grads = tape.backward(loss)?;
        let g: Vec<&Tensor> = leaves.iter().map(|&v| grads.get(v).expect("param")).collect();
        adam.step(mlp.tensors_mut(), &g);
    }
    Ok(FrozenClassifier { standardizer, mlp, l2 })
}

pub fn accuracy_of(pred: &[usize], y: &[usize]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    hits as f64 / y.len().max(1) as f64
}

/// F1 of class 1.
pub fn f1_positive(pred: &[usize], y: &[usize]) -> f64 {
    let tp = pred.iter().zip(y).filter(|&(&p, &t)| p == 1 && t == 1).count() as f64;
    let fp = pred.iter().zip(y).filter(|&(&p, &t)| p == 1 && t != 1).count() as f64;
    let fn_ = pred.iter().zip(y).filter(|&(&p, &t)| p != 1 && t == 1).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}
