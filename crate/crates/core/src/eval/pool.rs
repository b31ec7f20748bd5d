use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::classifier::{accuracy_of, check_labels, penalized, Adam, Standardizer};
use super::stratified_split;
use crate::error::{Error, Result};
use crate::multitask::Mlp;
use crate::rng::Rng;
use crate::tensor::{argmax, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Fraction of rows held out to measure accuracy.
    pub holdout: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            iterations: 300,
            learning_rate: 0.05,
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolAnalysisResult {
    pub encoders: Vec<String>,
    /// Softmax of the learned pooling logits, one weight per encoder.
    pub alpha: Vec<f64>,
    /// Held-out accuracy of the pooled prediction.
    pub accuracy: f64,
    pub seed: u64,
}

struct Pooled {
    heads: Vec<Mlp>,
    logits: Tensor,
}

impl Pooled {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.heads.iter().flat_map(|h| h.tensors()).collect();
        v.push(&self.logits);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { heads, logits } = self;
        let mut v: Vec<&mut Tensor> = heads.iter_mut().flat_map(|h| h.tensors_mut()).collect();
        v.push(logits);
        v
    }

    /// Returns (mixed probabilities, pooling weights, head weight matrices, all leaves).
    fn forward(&self, tape: &mut Tape, xs: &[Tensor], trainable: bool) -> Result<(Var, Var, Vec<Var>, Vec<Var>)> {
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        let alpha = tape.softmax(leaves[leaves.len() - 1]);
        let mut mixed = None;
        let mut weights = Vec::new();
        for (e, x) in xs.iter().enumerate() {
            let (w, b) = (leaves[2 * e], leaves[2 * e + 1]);
            weights.push(w);
            let xv = tape.constant(x.clone());
            let z = tape.matmul(xv, w)?;
            let z = tape.add_bias(z, b)?;
            let p = tape.softmax(z);
            let a = tape.slice_cols(alpha, e, e + 1)?;
            let term = tape.mul_scalar(p, a)?;
            mixed = Some(match mixed {
                None => term,
                Some(m) => tape.add(m, term)?,
            });
        }
        Ok((mixed.expect("at least one encoder"), alpha, weights, leaves))
    }
}

/// Fits one softmax classifier per encoder plus pooling logits, jointly,
/// on the combined prediction `Σ_e α_e p_e` with `α = softmax(logits)`.
pub fn weighted_pool_analysis(
    sets: &[(String, &Tensor)],
    labels: &[usize],
    num_classes: usize,
    config: &PoolConfig,
    seed: u64,
) -> Result<PoolAnalysisResult> {
    if sets.is_empty() {
        return Err(Error::invalid("pool analysis needs at least one encoder"));
    }
    if !(config.holdout > 0.0 && config.holdout < 1.0) || config.iterations == 0 {
        return Err(Error::config("pool", "holdout must be in (0, 1) and iterations >= 1"));
    }
    let n = labels.len();
    for (name, x) in sets {
        if x.rows() != n {
            return Err(Error::Alignment(format!("{name}: {} rows for {n} labels", x.rows())));
        }
    }
    check_labels(labels, n, num_classes)?;

    let (train_idx, _, test_idx) = stratified_split(labels, num_classes, 1.0 - config.holdout, 0.0, seed)?;
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::invalid("pool analysis split left an empty side"));
    }

    let mut rng = Rng::seed_from_u64(seed);
    let mut heads = Vec::new();
    let mut train_x = Vec::new();
    let mut test_x = Vec::new();
    for (_, x) in sets {
        let tr = x.gather_rows(&train_idx);
        let st = Standardizer::fit(&tr);
        train_x.push(st.apply(&tr)?);
        test_x.push(st.apply(&x.gather_rows(&test_idx))?);
        heads.push(Mlp::init(x.cols(), 0, num_classes, &mut rng));
    }
    let mut model = Pooled {
        heads,
        logits: Tensor::zeros(&[1, sets.len()]),
    };
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let mut adam = Adam::new(&model.tensors(), config.learning_rate);
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let (mixed, _, weights, leaves) = model.forward(&mut tape, &train_x, true)?;
        let ce = tape.cross_entropy(mixed, &y_train)?;
        let loss = penalized(&mut tape, ce, &weights, config.l2)?;
        let grads = tape.backward(loss)?;
        let g: Vec<&Tensor> = leaves.iter().map(|&v| grads.get(v).expect("param")).collect();
        adam.step(model.tensors_mut(), &g);
    }

    let mut tape = Tape::new();
    let (mixed, alpha, _, _) = model.forward(&mut tape, &test_x, false)?;
    let p = tape.value(mixed);
    let pred: Vec<usize> = (0..p.rows()).map(|i| argmax(p.row(i))).collect();
    Ok(PoolAnalysisResult {
        encoders: sets.iter().map(|(n, _)| n.clone()).collect(),
        alpha: tape.value(alpha).data().to_vec(),
        accuracy: accuracy_of(&pred, &y_test),
        seed,
    })
}
