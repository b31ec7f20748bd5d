//! Central-difference gradient-check suites over the tensor ops, the
//! encoder pipeline, and the multi-task objective.

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::encoder::{encode, lstm_step_on, pair_features_on, EncoderParams, EncoderVars, LstmParams, LstmVars};
use crate::error::{Error, Result};
use crate::multitask::{step_objective, Adversarial, ModelConfig, MtlModel, StepVars, TaskHead, TaskKind, TrainConfig};
use crate::rng::{Rng, SeedStreams};
use crate::tensor::{grad_check, GradCheckReport, GramForm, OpKind, Tape, Tensor, Var};
use crate::text::{synth_word_vectors, Batch, DatasetRecord, SentenceBatch};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Encoder,
    Mtl,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "encoder" => Ok(Scope::Encoder),
            "mtl" => Ok(Scope::Mtl),
            _ => Err(Error::config("scope", format!("expected ops, encoder or mtl, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            entries: r.entries,
            analytic: r.analytic,
            numeric: r.numeric,
            passed: r.passes(TOLERANCE),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub eps: f64,
    pub seed: u64,
    /// Op whose gradient rule was deliberately corrupted, if any.
    pub injected_fault: Option<String>,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn run(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let checks = match scope {
        Scope::Ops => ops_checks(seed, fault)?,
        Scope::Encoder => encoder_checks(seed, fault)?,
        Scope::Mtl => mtl_checks(seed, fault)?,
    };
    Ok(SuiteReport {
        scope,
        tolerance: TOLERANCE,
        eps: EPS,
        seed,
        injected_fault: fault.map(|k| k.name().to_string()),
        checks,
    })
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// `Σ x ⊙ R` for a fixed random `R`, so every entry of `x` gets a distinct
/// upstream gradient.
fn readout(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = uniform(&mut Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let c = tape.constant(r);
    let m = tape.mul(x, c)?;
    Ok(tape.sum(m))
}

fn check<F>(name: &str, params: &[Tensor], fault: Option<OpKind>, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = grad_check(params, EPS, |tape, vars| {
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        f(tape, vars)
    })?;
    Ok(CheckResult::new(name, r))
}

/// One check per differentiable op, named after the op.
fn ops_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let streams = SeedStreams::new(seed);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let rng = &mut streams.rng(&format!("gradcheck/ops/{}", kind.name()));
        let rs = streams.seed(&format!("gradcheck/readout/{}", kind.name()));
        let u = |rng: &mut Rng, shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
        let name = kind.name();
        let result = match kind {
            OpKind::Leaf => continue,
            OpKind::MatMul => check(name, &[u(rng, &[3, 4]), u(rng, &[4, 2])], fault, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y, rs)
            })?,
            OpKind::Transpose => check(name, &[u(rng, &[3, 2])], fault, |t, v| {
                let y = t.transpose(v[0])?;
                readout(t, y, rs)
            })?,
            OpKind::Add => check(name, &[u(rng, &[3, 3]), u(rng, &[3, 3])], fault, |t, v| {
                let y = t.add(v[0], v[1])?;
                readout(t, y, rs)
            })?,
            OpKind::Sub => check(name, &[u(rng, &[3, 3]), u(rng, &[3, 3])], fault, |t, v| {
                let y = t.sub(v[0], v[1])?;
                readout(t, y, rs)
            })?,
            // Mul and Sum also make up the readout, so they are checked
            // against a plain sum of squares instead.
            OpKind::Mul => check(name, &[u(rng, &[3, 3]), u(rng, &[3, 3])], fault, |t, v| {
                let y = t.mul(v[0], v[1])?;
                t.frobenius_sq(y)
            })?,
            OpKind::AddBias => check(name, &[u(rng, &[3, 4]), u(rng, &[4])], fault, |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                readout(t, y, rs)
            })?,
            OpKind::Sigmoid => check(name, &[u(rng, &[3, 3])], fault, |t, v| {
                let y = t.sigmoid(v[0]);
                readout(t, y, rs)
            })?,
            OpKind::Tanh => check(name, &[u(rng, &[3, 3])], fault, |t, v| {
                let y = t.tanh(v[0]);
                readout(t, y, rs)
            })?,
            OpKind::Softmax => check(name, &[u(rng, &[2, 4])], fault, |t, v| {
                let y = t.softmax(v[0]);
                readout(t, y, rs)
            })?,
            OpKind::CrossEntropy => check(name, &[uniform(rng, &[3, 3], 0.1, 1.0)], fault, |t, v| {
                t.cross_entropy(v[0], &[0, 2, 1])
            })?,
            OpKind::Concat => check(name, &[u(rng, &[3, 2]), u(rng, &[3, 3])], fault, |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                readout(t, y, rs)
            })?,
            OpKind::SliceCols => check(name, &[u(rng, &[3, 5])], fault, |t, v| {
                let y = t.slice_cols(v[0], 1, 4)?;
                readout(t, y, rs)
            })?,
            OpKind::FrobeniusSq => check(name, &[u(rng, &[3, 3])], fault, |t, v| t.frobenius_sq(v[0]))?,
            OpKind::Sum => check(name, &[u(rng, &[3, 3])], fault, |t, v| {
                let y = t.sum(v[0]);
                t.mul(y, y)
            })?,
            OpKind::Scale => check(name, &[u(rng, &[3, 3])], fault, |t, v| {
                let y = t.scale(v[0], -1.7);
                readout(t, y, rs)
            })?,
            OpKind::MulScalar => check(name, &[u(rng, &[3, 3]), u(rng, &[1])], fault, |t, v| {
                let y = t.mul_scalar(v[0], v[1])?;
                readout(t, y, rs)
            })?,
            // A single reversal is deliberately not the true gradient; two
            // in a row are, and exercise the same backward rule.
            OpKind::ReverseGrad => check(name, &[u(rng, &[3, 3])], fault, |t, v| {
                let y = t.reverse_grad(v[0], 1.0);
                let y = t.reverse_grad(y, 1.0);
                readout(t, y, rs)
            })?,
            OpKind::MaxPool => {
                let params: Vec<Tensor> = (0..4).map(|_| u(rng, &[3, 2])).collect();
                let mask = vec![vec![true; 4], vec![true, true, false, false], vec![true, false, false, false]];
                check(name, &params, fault, |t, v| {
                    let y = t.max_pool(v, &mask)?;
                    readout(t, y, rs)
                })?
            }
            OpKind::Blend => check(name, &[u(rng, &[3, 2]), u(rng, &[3, 2])], fault, |t, v| {
                let y = t.blend(v[0], v[1], &[true, false, true])?;
                readout(t, y, rs)
            })?,
            OpKind::CrossGramSq => {
                let params: Vec<Tensor> = (0..6).map(|_| u(rng, &[2, 3])).collect();
                let mask = vec![vec![true; 3], vec![true, true, false]];
                let timestep = check("cross_gram_sq(timestep)", &params, fault, |t, v| {
                    t.cross_gram_sq(&v[..3], &v[3..], &mask, GramForm::Timestep, 0.5)
                })?;
                out.push(timestep);
                check("cross_gram_sq(feature)", &params, fault, |t, v| {
                    t.cross_gram_sq(&v[..3], &v[3..], &mask, GramForm::Feature, 0.5)
                })?
            }
        };
        out.push(result);
    }
    Ok(out)
}

fn toy_vocab(seed: u64, dim: usize) -> Result<(crate::text::Vocab, crate::text::EmbeddingTable)> {
    let words: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    synth_word_vectors(seed, &words, dim)
}

fn encoder_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let streams = SeedStreams::new(seed);
    let (e, d) = (5, 4);
    let rng = &mut streams.rng("gradcheck/encoder");
    let rs = streams.seed("gradcheck/encoder/readout");
    let mut out = Vec::new();

    let lstm = LstmParams::init(e, d, rng);
    let mut params: Vec<Tensor> = lstm.tensors().into_iter().cloned().collect();
    params.extend([
        uniform(rng, &[2, e], -1.0, 1.0),
        uniform(rng, &[2, d], -1.0, 1.0),
        uniform(rng, &[2, d], -1.0, 1.0),
    ]);
    out.push(check("lstm_step", &params, fault, |t, v| {
        let p = LstmVars::from_leaves(t, [v[0], v[1], v[2]])?;
        let (h, c) = lstm_step_on(t, v[3], v[4], v[5], &p)?;
        let both = t.concat(&[h, c])?;
        readout(t, both, rs)
    })?);

    let (vocab, table) = toy_vocab(streams.seed("gradcheck/encoder/vectors"), e)?;
    let ids = |ws: &[usize]| ws.iter().map(|&i| vocab.lookup(&format!("w{i}"))).collect::<Vec<_>>();
    let batch = SentenceBatch::from_indices(&[ids(&[0, 1, 2, 3, 4, 5]), ids(&[6, 2, 7]), ids(&[3])])?;
    let enc = EncoderParams::init(e, d, rng);
    let params: Vec<Tensor> = enc.tensors().into_iter().cloned().collect();
    out.push(check("bilstm_max", &params, fault, |t, v| {
        let vars = EncoderVars::from_leaves(t, v)?;
        let s = encode(t, &batch, &table, &vars)?;
        readout(t, s, rs)
    })?);

    let b2 = SentenceBatch::from_indices(&[ids(&[5, 4]), ids(&[1, 0, 7, 7]), ids(&[2, 6, 3])])?;
    out.push(check("bilstm_max_pair_features", &params, fault, |t, v| {
        let vars = EncoderVars::from_leaves(t, v)?;
        let s1 = encode(t, &batch, &table, &vars)?;
        let s2 = encode(t, &b2, &table, &vars)?;
        let f = pair_features_on(t, s1, s2)?;
        readout(t, f, rs)
    })?);
    Ok(out)
}

fn mtl_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let streams = SeedStreams::new(seed);
    let (e, d) = (4, 4);
    let (vocab, table) = toy_vocab(streams.seed("gradcheck/mtl/vectors"), e)?;
    let heads = [
        TaskHead {
            name: "single".into(),
            kind: TaskKind::Single,
            num_classes: 2,
        },
        TaskHead {
            name: "pair".into(),
            kind: TaskKind::Pair,
            num_classes: 3,
        },
    ];
    let model_cfg = ModelConfig {
        hidden_dim: d,
        classifier_hidden: 3,
    };
    let model = MtlModel::init(&heads, e, &model_cfg, &streams.child("gradcheck/mtl/init"))?;
    let w = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let single = [DatasetRecord::single(w("w0 w1 w2 w3"), 1), DatasetRecord::single(w("w4 w5"), 0)];
    let pair = [
        DatasetRecord::pair(w("w1 w2 w3"), w("w6 w7"), 2),
        DatasetRecord::pair(w("w5"), w("w0 w3 w4 w2"), 0),
    ];
    let mut out = Vec::new();
    for (name, mode, beta, gamma) in [
        ("asp", Adversarial::Reversal, 0.5, 0.1),
        ("sp", Adversarial::Off, 0.0, 0.1),
        ("asp_feature_gram", Adversarial::Reversal, 0.5, 0.1),
    ] {
        let config = TrainConfig {
            beta,
            gamma,
            adversarial: mode,
            diff_form: if name == "asp_feature_gram" {
                GramForm::Feature
            } else {
                GramForm::Timestep
            },
            ..TrainConfig::default()
        };
        let with_disc = mode.is_on();
        for (k, records) in [(0usize, &single[..]), (1, &pair[..])] {
            let refs: Vec<&DatasetRecord> = records.iter().collect();
            let batch = Batch::from_records(&refs, &vocab)?;
            let params: Vec<Tensor> = model.step_tensors(k, with_disc).into_iter().cloned().collect();
            let kind = heads[k].kind;
            let label = format!("{name}/{}", heads[k].name);
            out.push(check(&label, &params, fault, |t, v| {
                let vars = StepVars::from_leaves(t, v, true, with_disc)?;
                Ok(step_objective(t, &vars, &batch, k, kind, &table, &config)?.total)
            })?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for scope in [Scope::Ops, Scope::Encoder, Scope::Mtl] {
            let r = run(scope, 0, None).unwrap();
            assert!(r.passed(), "{scope:?}: {:?}", r.failures());
        }
    }

    #[test]
    fn ops_suite_covers_every_op() {
        let r = run(Scope::Ops, 1, None).unwrap();
        for kind in OpKind::ALL.into_iter().filter(|&k| k != OpKind::Leaf) {
            assert!(r.checks.iter().any(|c| c.name.starts_with(kind.name())), "{kind}");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let r = run(Scope::Ops, 0, Some(OpKind::Tanh)).unwrap();
        let failed: Vec<&str> = r.failures().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["tanh"]);
        assert!(!run(Scope::Encoder, 0, Some(OpKind::Sigmoid)).unwrap().passed());
        assert!(!run(Scope::Mtl, 0, Some(OpKind::CrossGramSq)).unwrap().passed());
    }
}
