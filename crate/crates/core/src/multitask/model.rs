use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::encoder::{EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStreams};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{DatasetRecord, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Single,
    Pair,
}

/// A supervised training task with its splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    pub train: Vec<DatasetRecord>,
    pub dev: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl TaskSpec {
    pub fn n(&self) -> usize {
        self.train.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', ':', '+']) || self.name.contains(char::is_whitespace) {
            return Err(Error::config("tasks.name", format!("invalid task name {:?}", self.name)));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("tasks.{}.num_classes", self.name), "must be at least 2"));
        }
        if self.train.is_empty() {
            return Err(Error::config(format!("tasks.{}.train", self.name), "empty split"));
        }
        if self.dev.is_empty() {
            return Err(Error::config(format!("tasks.{}.dev", self.name), "empty split"));
        }
        for (split, records) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for r in records.iter() {
                let ok_kind = r.sentence2.is_some() == (self.kind == TaskKind::Pair);
                let ok_label = matches!(r.target, Target::Label(l) if l < self.num_classes);
                if !ok_kind || !ok_label {
                    return Err(Error::config(
                        format!("tasks.{}.{split}", self.name),
                        "record does not match the task kind or class count",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}

/// Softmax classifier with an optional tanh hidden layer. Weights are stored
/// `in × out` so rows multiply from the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Option<(Tensor, Tensor)>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        let layer = |i: usize, o: usize, rng: &mut Rng| (uniform(i, o, 1.0 / (i as f64).sqrt(), rng), Tensor::zeros(&[o]));
        if hidden == 0 {
            let (w_out, b_out) = layer(input, classes, rng);
            Self {
                hidden: None,
                w_out,
                b_out,
            }
        } else {
            let h = layer(input, hidden, rng);
            let (w_out, b_out) = layer(hidden, classes, rng);
            Self {
                hidden: Some(h),
                w_out,
                b_out,
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.w_out.rows(), |(w, _)| w.rows())
    }

    pub fn num_classes(&self) -> usize {
        self.w_out.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(4);
        if let Some((w, b)) = &self.hidden {
            v.extend([w, b]);
        }
        v.extend([&self.w_out, &self.b_out]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(4);
        if let Some((w, b)) = &mut self.hidden {
            v.extend([w, b]);
        }
        v.extend([&mut self.w_out, &mut self.b_out]);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    hidden: Option<(Var, Var)>,
    w_out: Var,
    b_out: Var,
}

impl MlpVars {
    /// Two leaves for a linear classifier, four with a hidden layer.
    pub fn from_leaves(leaves: &[Var]) -> Result<Self> {
        match *leaves {
            [w_out, b_out] => Ok(Self {
                hidden: None,
                w_out,
                b_out,
            }),
            [w, b, w_out, b_out] => Ok(Self {
                hidden: Some((w, b)),
                w_out,
                b_out,
            }),
            _ => Err(Error::invalid(format!("classifier needs 2 or 4 leaves, got {}", leaves.len()))),
        }
    }

    /// Row-wise class probabilities.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((w, b)) = self.hidden {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = tape.tanh(z);
        }
        let z = tape.matmul(h, self.w_out)?;
        let z = tape.add_bias(z, self.b_out)?;
        Ok(tape.softmax(z))
    }
}

/// Task-identity classifier on shared embeddings: `softmax(W s + b)` with
/// `W` stored `K × 2d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub w: Tensor,
    pub b: Tensor,
}

impl Discriminator {
    pub fn init(tasks: usize, input: usize, rng: &mut Rng) -> Self {
        Self {
            w: uniform(tasks, input, 1.0 / (input as f64).sqrt(), rng),
            b: Tensor::zeros(&[tasks]),
        }
    }

    pub fn zeros(tasks: usize, input: usize) -> Self {
        Self {
            w: Tensor::zeros(&[tasks, input]),
            b: Tensor::zeros(&[tasks]),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.w.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    w_t: Var,
    b: Var,
}

impl DiscriminatorVars {
    pub fn from_leaves(tape: &mut Tape, leaves: &[Var]) -> Result<Self> {
        match *leaves {
            [w, b] => Ok(Self {
                w_t: tape.transpose(w)?,
                b,
            }),
            _ => Err(Error::invalid("discriminator needs 2 leaves")),
        }
    }

    pub fn forward(&self, tape: &mut Tape, shared: Var) -> Result<Var> {
        let z = tape.matmul(shared, self.w_t)?;
        let z = tape.add_bias(z, self.b)?;
        Ok(tape.softmax(z))
    }
}

/// Task metadata the model needs at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
}

impl From<&TaskSpec> for TaskHead {
    fn from(t: &TaskSpec) -> Self {
        Self {
            name: t.name.clone(),
            kind: t.kind,
            num_classes: t.num_classes,
        }
    }
}

/// Shared encoder, one private encoder and classifier per task, and the
/// task discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel {
    pub tasks: Vec<TaskHead>,
    pub shared: EncoderParams,
    pub private: Vec<EncoderParams>,
    pub classifiers: Vec<Mlp>,
    pub discriminator: Discriminator,
}

impl MtlModel {
    pub fn init(tasks: &[TaskHead], input_dim: usize, config: &ModelConfig, streams: &SeedStreams) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::config("tasks.name", format!("duplicate task {:?}", t.name)));
            }
        }
        let d = config.hidden_dim;
        let out = 2 * d;
        let shared = EncoderParams::init(input_dim, d, &mut streams.rng("init/shared"));
        let mut private = Vec::new();
        let mut classifiers = Vec::new();
        for t in tasks {
            private.push(EncoderParams::init(
                input_dim,
                d,
                &mut streams.rng(&format!("init/private/{}", t.name)),
            ));
            let width = match t.kind {
                TaskKind::Single => 2 * out,
                TaskKind::Pair => 8 * out,
            };
            classifiers.push(Mlp::init(
                width,
                config.classifier_hidden,
                t.num_classes,
                &mut streams.rng(&format!("init/classifier/{}", t.name)),
            ));
        }
        let discriminator = Discriminator::init(tasks.len(), out, &mut streams.rng("init/discriminator"));
        Ok(Self {
            tasks: tasks.to_vec(),
            shared,
            private,
            classifiers,
            discriminator,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown task {name:?}")))
    }

    /// Parameters one step on task `k` touches, in leaf order: shared
    /// encoder, private encoder `k`, classifier `k`, then the discriminator
    /// if requested.
    pub fn step_tensors(&self, k: usize, with_discriminator: bool) -> Vec<&Tensor> {
        let mut v = self.shared.tensors();
        v.extend(self.private[k].tensors());
        v.extend(self.classifiers[k].tensors());
        if with_discriminator {
            v.extend(self.discriminator.tensors());
        }
        v
    }

    pub fn step_tensors_mut(&mut self, k: usize, with_discriminator: bool) -> Vec<&mut Tensor> {
        let Self {
            shared,
            private,
            classifiers,
            discriminator,
            ..
        } = self;
        let mut v = shared.tensors_mut();
        v.extend(private[k].tensors_mut());
        v.extend(classifiers[k].tensors_mut());
        if with_discriminator {
            v.extend(discriminator.tensors_mut());
        }
        v
    }

    /// Registers the step parameters for task `k` on `tape`.
    pub fn bind_step(&self, tape: &mut Tape, k: usize, with_discriminator: bool, trainable: bool) -> Result<StepVars> {
        let leaves: Vec<Var> = self
            .step_tensors(k, with_discriminator)
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        StepVars::from_leaves(tape, &leaves, self.classifiers[k].hidden.is_some(), with_discriminator)
    }
}

/// Everything one task step reads, registered on a tape.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub shared: EncoderVars,
    pub private: EncoderVars,
    pub classifier: MlpVars,
    pub discriminator: Option<DiscriminatorVars>,
    pub leaves: Vec<Var>,
}

impl StepVars {
    pub fn from_leaves(tape: &mut Tape, leaves: &[Var], classifier_hidden: bool, with_discriminator: bool) -> Result<Self> {
        let nc = if classifier_hidden { 4 } else { 2 };
        let nd = if with_discriminator { 2 } else { 0 };
        if leaves.len() != 12 + nc + nd {
            return Err(Error::invalid(format!("step needs {} leaves, got {}", 12 + nc + nd, leaves.len())));
        }
        let shared = EncoderVars::from_leaves(tape, &leaves[..6])?;
        let private = EncoderVars::from_leaves(tape, &leaves[6..12])?;
        let classifier = MlpVars::from_leaves(&leaves[12..12 + nc])?;
        let discriminator = if with_discriminator {
            Some(DiscriminatorVars::from_leaves(tape, &leaves[12 + nc..])?)
        } else {
            None
        };
        Ok(Self {
            shared,
            private,
            classifier,
            discriminator,
            leaves: leaves.to_vec(),
        })
    }
}
