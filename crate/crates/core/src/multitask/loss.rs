use super::config::{Adversarial, TrainConfig};
use super::model::{Discriminator, DiscriminatorVars, MtlModel, StepVars, TaskKind};
use crate::encoder::{encode_with_states, pair_features_on, BatchHidden};
use crate::error::{Error, Result};
use crate::tensor::{GramForm, Tape, Tensor, Var};
use crate::text::{Batch, EmbeddingTable};

/// Encoder outputs for one side of a batch.
#[derive(Clone, Debug)]
pub struct SideStates {
    pub shared: Var,
    pub private: Var,
    pub shared_hidden: BatchHidden,
    pub private_hidden: BatchHidden,
}

#[derive(Clone, Debug)]
pub struct TaskOutput {
    /// `B × C_k` class probabilities.
    pub probs: Var,
    /// One entry for single-sentence tasks, two for pair tasks.
    pub sides: Vec<SideStates>,
}

/// Shared and private embeddings of every sentence, concatenated (and
/// composed into pair features for pair tasks), fed through the task
/// classifier.
pub fn forward_task(tape: &mut Tape, vars: &StepVars, batch: &Batch, kind: TaskKind, table: &EmbeddingTable) -> Result<TaskOutput> {
    let mut sentences = vec![&batch.first];
    match (kind, &batch.second) {
        (TaskKind::Pair, Some(second)) => sentences.push(second),
        (TaskKind::Single, None) => {}
        _ => return Err(Error::invalid("batch does not match the task kind")),
    }
    let mut sides = Vec::with_capacity(sentences.len());
    let mut reps = Vec::with_capacity(sentences.len());
    for s in sentences {
        let (shared, shared_hidden) = encode_with_states(tape, s, table, &vars.shared)?;
        let (private, private_hidden) = encode_with_states(tape, s, table, &vars.private)?;
        reps.push(tape.concat(&[shared, private])?);
        sides.push(SideStates {
            shared,
            private,
            shared_hidden,
            private_hidden,
        });
    }
    let input = match reps[..] {
        [r] => r,
        [a, b] => pair_features_on(tape, a, b)?,
        _ => unreachable!(),
    };
    let probs = vars.classifier.forward(tape, input)?;
    Ok(TaskOutput { probs, sides })
}

/// Task-identity probabilities for one shared embedding.
pub fn discriminator_forward(disc: &Discriminator, shared: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaves = [tape.constant(disc.w.clone()), tape.constant(disc.b.clone())];
    let vars = DiscriminatorVars::from_leaves(&mut tape, &leaves)?;
    let x = tape.constant(Tensor::matrix(1, shared.len(), shared.to_vec())?);
    let p = vars.forward(&mut tape, x)?;
    Ok(tape.value(p).data().to_vec())
}

/// Discriminator cross-entropy of `shared` (`B × 2d`) against task `k`.
///
/// With `reverse` the shared embeddings pass through a gradient-reversal
/// node first: the discriminator still descends this loss, the encoder
/// ascends it.
pub fn adv_loss(
    tape: &mut Tape,
    disc: Option<&DiscriminatorVars>,
    shared: Var,
    task: usize,
    mode: Adversarial,
    reverse: bool,
) -> Result<Var> {
    let disc = match (mode, disc) {
        (Adversarial::Off, _) => return Err(Error::invalid("adversarial loss requested in shared-private mode")),
        (_, None) => return Err(Error::invalid("adversarial loss needs discriminator parameters")),
        (_, Some(d)) => d,
    };
    let x = if reverse { tape.reverse_grad(shared, 1.0) } else { shared };
    let probs = disc.forward(tape, x)?;
    let rows = tape.value(shared).rows();
    tape.cross_entropy(probs, &vec![task; rows])
}

/// Mean over the batch of the per-sentence shared/private hidden-state
/// overlap.
pub fn diff_loss_on(tape: &mut Tape, shared: &BatchHidden, private: &BatchHidden, form: GramForm) -> Result<Var> {
    if shared.mask != private.mask {
        return Err(Error::invalid("shared and private hidden states use different masks"));
    }
    let b = shared.mask.len();
    tape.cross_gram_sq(&shared.steps, &private.steps, &shared.mask, form, 1.0 / b as f64)
}

/// Overlap of one sentence's `T × w` shared and private hidden-state
/// matrices; rows where `mask` is false are ignored.
pub fn diff_loss(h_s: &Tensor, h_p: &Tensor, mask: &[bool], form: GramForm) -> Result<f64> {
    if h_s.ndim() != 2 || h_p.ndim() != 2 || h_s.rows() != h_p.rows() || (form == GramForm::Timestep && h_s.cols() != h_p.cols()) {
        return Err(Error::Shape {
            op: "diff_loss",
            left: h_s.shape().to_vec(),
            right: h_p.shape().to_vec(),
        });
    }
    if mask.len() != h_s.rows() {
        return Err(Error::Shape {
            op: "diff_loss",
            left: h_s.shape().to_vec(),
            right: vec![mask.len()],
        });
    }
    let mut tape = Tape::new();
    let steps = |tape: &mut Tape, h: &Tensor| -> Vec<Var> { (0..h.rows()).map(|t| tape.constant(h.slice_rows(t, t + 1))).collect() };
    let s = steps(&mut tape, h_s);
    let p = steps(&mut tape, h_p);
    let v = tape.cross_gram_sq(&s, &p, &[mask.to_vec()], form, 1.0)?;
    Ok(tape.value(v).item())
}

/// `task + β·adv + γ·diff`, leaving out terms whose weight is zero and the
/// adversarial term when there is none.
pub fn total_loss(tape: &mut Tape, task: Var, adv: Option<Var>, diff: Option<Var>, beta: f64, gamma: f64) -> Result<Var> {
    let mut total = task;
    if let Some(a) = adv.filter(|_| beta != 0.0) {
        let term = tape.scale(a, beta);
        total = tape.add(total, term)?;
    }
    if let Some(d) = diff.filter(|_| gamma != 0.0) {
        let term = tape.scale(d, gamma);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub task: Var,
    pub adv: Option<Var>,
    pub diff: Var,
    pub output: TaskOutput,
}

fn mean(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    match *vs {
        [v] => Ok(v),
        _ => {
            let mut acc = vs[0];
            for &v in &vs[1..] {
                acc = tape.add(acc, v)?;
            }
            Ok(tape.scale(acc, 1.0 / vs.len() as f64))
        }
    }
}

/// Full objective for one batch of task `k`. Adversarial and difference
/// terms are averaged over the sentence sides of pair batches.
pub fn step_loss(
    tape: &mut Tape,
    vars: &StepVars,
    batch: &Batch,
    k: usize,
    kind: TaskKind,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<StepLoss> {
    step_loss_inner(tape, vars, batch, k, kind, table, config, true)
}

/// Same value as [`step_loss`] but without gradient reversal, so the tape
/// gradient is the true gradient of the objective (what a finite-difference
/// check sees).
pub fn step_objective(
    tape: &mut Tape,
    vars: &StepVars,
    batch: &Batch,
    k: usize,
    kind: TaskKind,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<StepLoss> {
    step_loss_inner(tape, vars, batch, k, kind, table, config, false)
}

#[allow(clippy::too_many_arguments)]
fn step_loss_inner(
    tape: &mut Tape,
    vars: &StepVars,
    batch: &Batch,
    k: usize,
    kind: TaskKind,
    table: &EmbeddingTable,
    config: &TrainConfig,
    reverse: bool,
) -> Result<StepLoss> {
    let output = forward_task(tape, vars, batch, kind, table)?;
    let task = tape.cross_entropy(output.probs, &batch.labels()?)?;
    let adv = if config.adversarial.is_on() {
        let mut parts = Vec::new();
        for side in &output.sides {
            parts.push(adv_loss(
                tape,
                vars.discriminator.as_ref(),
                side.shared,
                k,
                config.adversarial,
                reverse,
            )?);
        }
        Some(mean(tape, &parts)?)
    } else {
        None
    };
    let mut parts = Vec::new();
    for side in &output.sides {
        parts.push(diff_loss_on(tape, &side.shared_hidden, &side.private_hidden, config.diff_form)?);
    }
    let diff = mean(tape, &parts)?;
    let total = total_loss(tape, task, adv, Some(diff), config.beta, config.gamma)?;
    Ok(StepLoss {
        total,
        task,
        adv,
        diff,
        output,
    })
}

impl MtlModel {
    /// Class probabilities for a batch of task `k`, without gradient tracking.
    pub fn predict(&self, k: usize, batch: &Batch, table: &EmbeddingTable) -> Result<Tensor> {
        if k >= self.num_tasks() {
            return Err(Error::invalid(format!("unknown task index {k}")));
        }
        let mut tape = Tape::new();
        let vars = self.bind_step(&mut tape, k, false, false)?;
        let out = forward_task(&mut tape, &vars, batch, self.tasks[k].kind, table)?;
        Ok(tape.value(out.probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::config::ModelConfig;
    use crate::multitask::model::TaskHead;
    use crate::rng::{Rng, SeedStreams};
    use crate::text::{DatasetRecord, EmbeddingTable, Target, Vocab};
    use rand::{Rng as _, SeedableRng};

    fn table(e: usize) -> (Vocab, EmbeddingTable) {
        let mut rng = Rng::seed_from_u64(1);
        let pairs: Vec<(String, Vec<f64>)> = (0..8)
            .map(|i| (format!("t{i}"), (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        EmbeddingTable::from_pairs(&pairs, e).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn heads() -> Vec<TaskHead> {
        vec![
            TaskHead {
                name: "a".into(),
                kind: TaskKind::Single,
                num_classes: 3,
            },
            TaskHead {
                name: "b".into(),
                kind: TaskKind::Pair,
                num_classes: 2,
            },
        ]
    }

    fn model(d: usize, e: usize, hidden: usize) -> MtlModel {
        let cfg = ModelConfig {
            hidden_dim: d,
            classifier_hidden: hidden,
        };
        MtlModel::init(&heads(), e, &cfg, &SeedStreams::new(7)).unwrap()
    }

    #[test]
    fn classifier_widths() {
        let m = model(16, 5, 8);
        assert_eq!(m.classifiers[0].input_dim(), 64);
        assert_eq!(m.classifiers[1].input_dim(), 256);
        assert_eq!(m.classifiers[0].num_classes(), 3);
        assert_eq!(m.discriminator.w.shape(), &[2, 32]);
        let (vocab, t) = table(5);
        let recs = [DatasetRecord::single(toks("t1 t2 t3"), 0), DatasetRecord::single(toks("t4"), 2)];
        let refs: Vec<&DatasetRecord> = recs.iter().collect();
        let batch = Batch::from_records(&refs, &vocab).unwrap();
        let p = m.predict(0, &batch, &t).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        assert!(m.predict(1, &batch, &t).is_err());
        assert!(m.task_index("zzz").is_err());
    }

    #[test]
    fn zero_discriminator_is_uniform() {
        let d = Discriminator::zeros(3, 4);
        let p = discriminator_forward(&d, &[0.5, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn discriminator_closed_form() {
        let d = Discriminator {
            w: Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap(),
            b: Tensor::vector(vec![0.1, -0.3]),
        };
        let s = [1.5, -0.5];
        let z0 = 0.5 * 1.5 + 0.5 + 0.1;
        let z1 = 3.0 - 0.125 - 0.3;
        let p0 = 1.0 / (1.0 + f64::exp(z1 - z0));
        let p = discriminator_forward(&d, &s).unwrap();
        assert!((p[0] - p0).abs() < 1e-15);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_discriminator_adv_loss_is_ln_k() {
        let mut tape = Tape::new();
        let leaves = [tape.param(&Tensor::zeros(&[3, 4])), tape.param(&Tensor::zeros(&[3]))];
        let dv = DiscriminatorVars::from_leaves(&mut tape, &leaves).unwrap();
        let s = tape.constant(Tensor::filled(&[5, 4], 0.3));
        let l = adv_loss(&mut tape, Some(&dv), s, 1, Adversarial::Reversal, true).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(adv_loss(&mut tape, Some(&dv), s, 1, Adversarial::Off, true).is_err());
    }

    #[test]
    fn reversal_flips_encoder_gradient_only() {
        let m = model(3, 4, 0);
        let (vocab, t) = table(4);
        let recs = [DatasetRecord::single(toks("t1 t2 t3"), 0), DatasetRecord::single(toks("t5 t6"), 1)];
        let refs: Vec<&DatasetRecord> = recs.iter().collect();
        let batch = Batch::from_records(&refs, &vocab).unwrap();
        let grads = |reverse: bool| {
            let mut tape = Tape::new();
            let vars = m.bind_step(&mut tape, 0, true, true).unwrap();
            let out = forward_task(&mut tape, &vars, &batch, TaskKind::Single, &t).unwrap();
            let l = adv_loss(
                &mut tape,
                vars.discriminator.as_ref(),
                out.sides[0].shared,
                0,
                Adversarial::Reversal,
                reverse,
            )
            .unwrap();
            let g = tape.backward(l).unwrap();
            vars.leaves.iter().map(|&v| g.get(v).unwrap().clone()).collect::<Vec<Tensor>>()
        };
        let (rev, plain) = (grads(true), grads(false));
        let n = rev.len();
        for (i, (a, b)) in rev.iter().zip(&plain).enumerate() {
            if i >= n - 2 {
                assert_eq!(a, b, "discriminator gradient changed");
            } else if i < 6 {
                assert_eq!(a, &b.map(|v| -v), "shared gradient not negated");
                assert!(a.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn diff_loss_examples() {
        let one = |rows: &[[f64; 2]]| Tensor::from_rows(rows).unwrap();
        let f = GramForm::Timestep;
        assert_eq!(diff_loss(&one(&[[1.0, 0.0]]), &one(&[[0.0, 1.0]]), &[true], f).unwrap(), 0.0);
        assert_eq!(diff_loss(&one(&[[1.0, 0.0]]), &one(&[[1.0, 0.0]]), &[true], f).unwrap(), 1.0);
        let hs = one(&[[0.3, -1.0], [2.0, 0.5]]);
        let hp = one(&[[1.5, 0.2], [-0.7, 0.9]]);
        for form in [GramForm::Timestep, GramForm::Feature] {
            let base = diff_loss(&hs, &hp, &[true, true], form).unwrap();
            let scaled = diff_loss(&hs.map(|v| 3.0 * v), &hp, &[true, true], form).unwrap();
            assert!((scaled - 9.0 * base).abs() < 1e-12 * scaled.abs());
        }
        let masked = diff_loss(&hs, &hp, &[true, false], f).unwrap();
        let first = diff_loss(&hs.slice_rows(0, 1), &hp.slice_rows(0, 1), &[true], f).unwrap();
        assert_eq!(masked, first);
        assert!(diff_loss(&hs, &one(&[[1.0, 0.0]]), &[true, true], f).is_err());
    }

    #[test]
    fn total_loss_terms() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.7));
        let adv = tape.constant(Tensor::scalar(1.1));
        let diff = tape.constant(Tensor::scalar(2.0));
        let l = total_loss(&mut tape, task, Some(adv), Some(diff), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.7);
        let l = total_loss(&mut tape, task, None, Some(diff), 0.5, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.7);
        let l = total_loss(&mut tape, task, Some(adv), Some(diff), 0.01, 0.05).unwrap();
        assert!((tape.value(l).item() - (0.7 + 0.011 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn pair_step_runs() {
        let m = model(2, 3, 4);
        let (vocab, t) = table(3);
        let recs = [DatasetRecord {
            sentence1: toks("t1 t2"),
            sentence2: Some(toks("t3")),
            target: Target::Label(1),
        }];
        let refs: Vec<&DatasetRecord> = recs.iter().collect();
        let batch = Batch::from_records(&refs, &vocab).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind_step(&mut tape, 1, true, true).unwrap();
        let cfg = TrainConfig::default();
        let l = step_loss(&mut tape, &vars, &batch, 1, TaskKind::Pair, &t, &cfg).unwrap();
        assert_eq!(l.output.sides.len(), 2);
        assert!(tape.value(l.total).item().is_finite());
        tape.backward(l.total).unwrap();
    }
}
