use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{Adversarial, LrSchedule, TrainConfig};
use super::loss::{adv_loss, step_loss};
use super::model::{DiscriminatorVars, MtlModel, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::{argmax, Tape, Tensor};
use crate::text::{Batch, DatasetRecord, EmbeddingTable, Vocab};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate used for this epoch's updates.
    pub lr: f64,
    /// Rate after the end-of-epoch dev check.
    pub lr_after: f64,
    pub train_loss: BTreeMap<String, f64>,
    pub dev_accuracy: BTreeMap<String, f64>,
    pub mean_dev_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_loss: Option<f64>,
    pub diff_loss: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub dev_history: Vec<BTreeMap<String, f64>>,
    pub mean_dev_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_mean_dev: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best mean dev accuracy.
    pub model: MtlModel,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// `param ← param − lr · grad` for each pair.
pub fn sgd_update(params: Vec<&mut Tensor>, grads: &[&Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid("parameter and gradient counts differ"));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_update",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Fraction of `records` whose argmax prediction matches the label.
pub fn accuracy(
    model: &MtlModel,
    k: usize,
    records: &[DatasetRecord],
    vocab: &Vocab,
    table: &EmbeddingTable,
    batch_size: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("accuracy over an empty split"));
    }
    let mut correct = 0usize;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&DatasetRecord> = chunk.iter().collect();
        let batch = Batch::from_records(&refs, vocab)?;
        let probs = model.predict(k, &batch, table)?;
        for (i, label) in batch.labels()?.into_iter().enumerate() {
            if argmax(probs.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Sums of per-epoch quantities.
#[derive(Default)]
struct Tally {
    task_loss: BTreeMap<usize, (f64, usize)>,
    adv: (f64, usize),
    diff: (f64, usize),
}

fn run_step(
    model: &mut MtlModel,
    k: usize,
    batch: &Batch,
    table: &EmbeddingTable,
    config: &TrainConfig,
    lr: f64,
    tally: &mut Tally,
) -> Result<()> {
    let adversarial = config.adversarial.is_on();
    let mut tape = Tape::new();
    let vars = model.bind_step(&mut tape, k, adversarial, true)?;
    let kind = model.tasks[k].kind;
    let loss = step_loss(&mut tape, &vars, batch, k, kind, table, config)?;
    let grads = tape.backward(loss.total)?;

    let entry = tally.task_loss.entry(k).or_default();
    entry.0 += tape.value(loss.task).item();
    entry.1 += 1;
    if let Some(a) = loss.adv {
        tally.adv.0 += tape.value(a).item();
        tally.adv.1 += 1;
    }
    tally.diff.0 += tape.value(loss.diff).item();
    tally.diff.1 += 1;

    let mut leaves = vars.leaves.clone();
    let detached: Vec<Tensor> = loss.output.sides.iter().map(|s| tape.value(s.shared).clone()).collect();
    if config.adversarial == Adversarial::Alternating {
        leaves.truncate(leaves.len() - 2);
    }
    let g: Vec<&Tensor> = leaves.iter().map(|&v| grads.get(v).expect("trainable leaf")).collect();
    let mut params = model.step_tensors_mut(k, adversarial);
    params.truncate(g.len());
    sgd_update(params, &g, lr)?;

    if config.adversarial == Adversarial::Alternating && config.beta != 0.0 {
        let mut tape = Tape::new();
        let leaves = [tape.param(&model.discriminator.w), tape.param(&model.discriminator.b)];
        let dv = DiscriminatorVars::from_leaves(&mut tape, &leaves)?;
        let mut total = None;
        for s in detached {
            let x = tape.constant(s);
            let l = adv_loss(&mut tape, Some(&dv), x, k, config.adversarial, false)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let sides = loss.output.sides.len() as f64;
        let l = tape.scale(total.expect("at least one side"), config.beta / sides);
        let grads = tape.backward(l)?;
        let g: Vec<&Tensor> = leaves.iter().map(|&v| grads.get(v).expect("trainable leaf")).collect();
        sgd_update(model.discriminator.tensors_mut(), &g, lr)?;
    }
    Ok(())
}

fn check_inputs(model: &MtlModel, tasks: &[TaskSpec], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("tasks", "at least one task is required"));
    }
    if tasks.len() != model.num_tasks() {
        return Err(Error::config("tasks", "model and task list differ in length"));
    }
    for (t, head) in tasks.iter().zip(&model.tasks) {
        t.validate()?;
        if t.name != head.name || t.kind != head.kind || t.num_classes != head.num_classes {
            return Err(Error::config("tasks", format!("task {:?} does not match the model head", t.name)));
        }
    }
    Ok(())
}

pub fn train(model: MtlModel, tasks: &[TaskSpec], vocab: &Vocab, table: &EmbeddingTable, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, tasks, vocab, table, config, |_| {})
}

/// Trains with SGD, calling `on_epoch` after every epoch's dev evaluation.
///
/// Each epoch shuffles every task's training set, then draws the task of
/// each next batch with probability proportional to that task's remaining
/// batches, so every example is seen once per epoch.
pub fn train_with(
    mut model: MtlModel,
    tasks: &[TaskSpec],
    vocab: &Vocab,
    table: &EmbeddingTable,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    check_inputs(&model, tasks, config)?;
    let streams = SeedStreams::new(config.seed);
    let mut schedule = LrSchedule::new(config);
    let mut state = TrainState {
        epoch: 0,
        lr: config.lr0,
        dev_history: Vec::new(),
        mean_dev_history: Vec::new(),
        best_epoch: 0,
        best_mean_dev: f64::NEG_INFINITY,
        schedule: schedule.clone(),
        seed: config.seed,
    };
    let mut best = model.clone();
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let lr = match schedule.begin_epoch() {
            Some(lr) => lr,
            None => break,
        };
        let mut queues: Vec<Vec<Vec<usize>>> = Vec::with_capacity(tasks.len());
        for t in tasks {
            let mut order: Vec<usize> = (0..t.train.len()).collect();
            order.shuffle(&mut streams.rng(&format!("shuffle/{}/{epoch}", t.name)));
            let mut batches: Vec<Vec<usize>> = order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
            batches.reverse();
            queues.push(batches);
        }
        let mut pick = streams.rng(&format!("interleave/{epoch}"));
        let mut tally = Tally::default();
        loop {
            let remaining: usize = queues.iter().map(Vec::len).sum();
            if remaining == 0 {
                break;
            }
            let mut r = pick.gen_range(0..remaining);
            let k = queues
                .iter()
                .position(|q| {
                    if r < q.len() {
                        true
                    } else {
                        r -= q.len();
                        false
                    }
                })
                .expect("remaining > 0");
            let idx = queues[k].pop().expect("non-empty queue");
            let refs: Vec<&DatasetRecord> = idx.iter().map(|&i| &tasks[k].train[i]).collect();
            let batch = Batch::from_records(&refs, vocab)?;
            run_step(&mut model, k, &batch, table, config, lr, &mut tally)?;
        }

        let mut dev = BTreeMap::new();
        for (k, t) in tasks.iter().enumerate() {
            dev.insert(t.name.clone(), accuracy(&model, k, &t.dev, vocab, table, config.batch_size)?);
        }
        let mean_dev = dev.values().sum::<f64>() / dev.len() as f64;
        schedule.end_epoch(mean_dev);
        if mean_dev >= state.best_mean_dev {
            state.best_mean_dev = mean_dev;
            state.best_epoch = epoch;
            best = model.clone();
        }
        let train_loss = tally
            .task_loss
            .iter()
            .map(|(&k, &(s, n))| (tasks[k].name.clone(), s / n as f64))
            .collect();
        let entry = EpochLog {
            epoch,
            lr,
            lr_after: schedule.lr(),
            train_loss,
            dev_accuracy: dev.clone(),
            mean_dev_accuracy: mean_dev,
            adv_loss: config.adversarial.is_on().then(|| tally.adv.0 / tally.adv.1.max(1) as f64),
            diff_loss: tally.diff.0 / tally.diff.1.max(1) as f64,
            beta: config.beta,
            gamma: config.gamma,
        };
        on_epoch(&entry);
        log.push(entry);
        state.epoch = epoch;
        state.dev_history.push(dev);
        state.mean_dev_history.push(mean_dev);
        if schedule.stopped() {
            break;
        }
    }
    state.lr = schedule.lr();
    state.schedule = schedule;
    Ok(TrainOutcome { model: best, state, log })
}

/// Writes the log as JSON lines.
pub fn write_log(out: &mut impl Write, log: &[EpochLog]) -> Result<()> {
    for entry in log {
        serde_json::to_writer(&mut *out, entry)?;
        out.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::config::ModelConfig;
    use crate::multitask::model::{TaskHead, TaskKind};
    use crate::text::{synth_task, synth_word_vectors, SynthSpec, SynthVocab};

    #[test]
    fn sgd_matches_hand_step() {
        // loss = (w0 * x + w1 - y)^2 at x = 2, y = 1
        let (x, y, lr) = (2.0, 1.0, 0.1);
        let mut w = Tensor::vector(vec![0.5, -0.25]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let xs = tape.constant(Tensor::vector(vec![x, 1.0]));
        let prod = tape.mul(wv, xs).unwrap();
        let pred = tape.sum(prod);
        let target = tape.constant(Tensor::scalar(y));
        let err = tape.sub(pred, target).unwrap();
        let sq = tape.mul(err, err).unwrap();
        let grads = tape.backward(sq).unwrap();
        sgd_update(vec![&mut w], &[grads.get(wv).unwrap()], lr).unwrap();
        let r = 0.5 * x - 0.25 - y;
        let expect = [0.5 - lr * 2.0 * r * x, -0.25 - lr * 2.0 * r];
        assert!((w.data()[0] - expect[0]).abs() < 1e-15);
        assert!((w.data()[1] - expect[1]).abs() < 1e-15);
    }

    fn tiny_tasks() -> (Vec<TaskSpec>, Vocab, EmbeddingTable) {
        let vocab_spec = SynthVocab {
            filler: 6,
            min_fill: 1,
            max_fill: 3,
        };
        let mut tasks = Vec::new();
        let mut tokens = Vec::new();
        for (i, name) in ["a", "b"].iter().enumerate() {
            let spec = SynthSpec {
                task: name.to_string(),
                num_classes: 2,
                n: 60,
                shared_signal_weight: 1.0,
                private_signal_weight: 1.0,
                vocab: vocab_spec.clone(),
            };
            let all = synth_task(i as u64, &spec).unwrap();
            tokens.extend(spec.tokens());
            tasks.push(TaskSpec {
                name: name.to_string(),
                kind: TaskKind::Single,
                num_classes: 2,
                train: all[..40].to_vec(),
                dev: all[40..].to_vec(),
                test: Vec::new(),
            });
        }
        let (vocab, table) = synth_word_vectors(3, &tokens, 4).unwrap();
        (tasks, vocab, table)
    }

    fn run(config: &TrainConfig) -> TrainOutcome {
        let (tasks, vocab, table) = tiny_tasks();
        let heads: Vec<TaskHead> = tasks.iter().map(TaskHead::from).collect();
        let mc = ModelConfig {
            hidden_dim: 3,
            classifier_hidden: 4,
        };
        let model = MtlModel::init(&heads, 4, &mc, &SeedStreams::new(config.seed)).unwrap();
        train(model, &tasks, &vocab, &table, config).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_log() {
        let c = small_config();
        let (a, b) = (run(&c), run(&c));
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        let mut buf = Vec::new();
        write_log(&mut buf, &a.log).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), a.log.len());
    }

    #[test]
    fn sp_log_has_no_adversarial_column() {
        let c = TrainConfig {
            adversarial: Adversarial::Off,
            ..small_config()
        };
        let out = run(&c);
        let mut buf = Vec::new();
        write_log(&mut buf, &out.log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("adv_loss"));
        let asp = run(&small_config());
        assert!(asp.log.iter().all(|l| l.adv_loss.is_some()));
    }

    #[test]
    fn lr_never_increases_and_best_is_kept() {
        let out = run(&small_config());
        let lrs: Vec<f64> = out.log.iter().map(|l| l.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let best = out.state.mean_dev_history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.state.best_mean_dev, best);
    }

    #[test]
    fn alternating_mode_trains() {
        let c = TrainConfig {
            adversarial: Adversarial::Alternating,
            ..small_config()
        };
        let out = run(&c);
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|l| l.adv_loss.unwrap().is_finite()));
    }

    #[test]
    fn rejects_empty_dev() {
        let (mut tasks, vocab, table) = tiny_tasks();
        let heads: Vec<TaskHead> = tasks.iter().map(TaskHead::from).collect();
        let mc = ModelConfig {
            hidden_dim: 2,
            classifier_hidden: 0,
        };
        let model = MtlModel::init(&heads, 4, &mc, &SeedStreams::new(1)).unwrap();
        tasks[1].dev.clear();
        assert!(train(model, &tasks, &vocab, &table, &small_config()).is_err());
    }
}
