//! BiLSTM-max sentence encoder: frozen embedding lookup, forward and backward
//! LSTM passes over the valid tokens of each sentence, masked max pooling,
//! and the `[s1, s2, s1 - s2, s1 ⊙ s2]` pair composition.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, GATE_ORDER};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{EmbeddingTable, SentenceBatch, Vocab};

/// One LSTM direction. Gate blocks are stacked `[i, f, g, o]` along the rows
/// of both weight matrices and the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4d × e`
    pub w_input: Tensor,
    /// `4d × d`
    pub w_hidden: Tensor,
    /// `4d`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn new(w_input: Tensor, w_hidden: Tensor, bias: Tensor) -> Result<Self> {
        let p = Self { w_input, w_hidden, bias };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let ws = self.w_hidden.shape();
        let ok = ws.len() == 2
            && ws[0] == 4 * ws[1]
            && self.w_input.ndim() == 2
            && self.w_input.shape()[0] == ws[0]
            && self.bias.shape() == [ws[0]];
        if !ok {
            return Err(Error::Shape {
                op: "lstm_params",
                left: self.w_input.shape().to_vec(),
                right: ws.to_vec(),
            });
        }
        if !(self.w_input.is_finite() && self.w_hidden.is_finite() && self.bias.is_finite()) {
            return Err(Error::invalid("non-finite LSTM parameters"));
        }
        Ok(())
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[4 * hidden_dim, input_dim]),
            w_hidden: Tensor::zeros(&[4 * hidden_dim, hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    /// Uniform `[-1/√d, 1/√d]` everywhere except the forget-gate bias, which
    /// starts at 1.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden_dim);
        for t in [&mut p.w_input, &mut p.w_hidden, &mut p.bias] {
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        for v in &mut p.bias.data_mut()[hidden_dim..2 * hidden_dim] {
            *v = 1.0;
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<LstmVars> {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let w_input = leaf(tape, &self.w_input);
        let w_hidden = leaf(tape, &self.w_hidden);
        let bias = leaf(tape, &self.bias);
        LstmVars::from_leaves(tape, [w_input, w_hidden, bias])
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

/// [`LstmParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    w_input_t: Var,
    w_hidden_t: Var,
    hidden_dim: usize,
}

impl LstmVars {
    /// Wraps already-registered `[w_input, w_hidden, bias]` leaves.
    pub fn from_leaves(tape: &mut Tape, leaves: [Var; 3]) -> Result<Self> {
        let [w_input, w_hidden, bias] = leaves;
        let hidden_dim = tape.value(w_hidden).cols();
        Ok(LstmVars {
            w_input,
            w_hidden,
            bias,
            w_input_t: tape.transpose(w_input)?,
            w_hidden_t: tape.transpose(w_hidden)?,
            hidden_dim,
        })
    }

    pub fn leaves(&self) -> [Var; 3] {
        [self.w_input, self.w_hidden, self.bias]
    }
}

/// One cell update on row-batched inputs: `x` is `B×e`, `h_prev` and
/// `c_prev` are `B×d`. Returns `(h, c)`.
pub fn lstm_step_on(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let d = p.hidden_dim;
    let zx = tape.matmul(x, p.w_input_t)?;
    let zh = tape.matmul(h_prev, p.w_hidden_t)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, p.bias)?;
    let zi = tape.slice_cols(z, 0, d)?;
    let zf = tape.slice_cols(z, d, 2 * d)?;
    let zg = tape.slice_cols(z, 2 * d, 3 * d)?;
    let zo = tape.slice_cols(z, 3 * d, 4 * d)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Single-vector cell update without gradient tracking.
pub fn lstm_step(params: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.hidden_dim();
    if x.len() != params.input_dim() || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::Shape {
            op: "lstm_step",
            left: vec![params.input_dim(), d, d],
            right: vec![x.len(), h_prev.len(), c_prev.len()],
        });
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let hv = tape.constant(Tensor::matrix(1, d, h_prev.to_vec())?);
    let cv = tape.constant(Tensor::matrix(1, d, c_prev.to_vec())?);
    let (h, c) = lstm_step_on(&mut tape, xv, hv, cv, &vars)?;
    Ok((tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
}

/// Both directions of a BiLSTM sharing `(e, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderParams {
    pub fn new(forward: LstmParams, backward: LstmParams) -> Result<Self> {
        if forward.input_dim() != backward.input_dim() || forward.hidden_dim() != backward.hidden_dim() {
            return Err(Error::Shape {
                op: "encoder_params",
                left: vec![forward.input_dim(), forward.hidden_dim()],
                right: vec![backward.input_dim(), backward.hidden_dim()],
            });
        }
        Ok(Self { forward, backward })
    }

    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let forward = LstmParams::init(input_dim, hidden_dim, rng);
        let backward = LstmParams::init(input_dim, hidden_dim, rng);
        Self { forward, backward }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim()
    }

    /// Width `2d` of hidden states and sentence embeddings.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<EncoderVars> {
        Ok(EncoderVars {
            forward: self.forward.bind(tape, trainable)?,
            backward: self.backward.bind(tape, trainable)?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.forward.tensors().into_iter().chain(self.backward.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { forward, backward } = self;
        forward.tensors_mut().into_iter().chain(backward.tensors_mut()).collect()
    }

    /// Sentence embeddings (`B × 2d`) without gradient tracking.
    pub fn embed(&self, batch: &SentenceBatch, table: &EmbeddingTable) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let s = encode(&mut tape, batch, table, &vars)?;
        Ok(tape.value(s).clone())
    }

    /// Embeds tokenized sentences in chunks of `batch_size`, returning one
    /// row per sentence in input order.
    pub fn embed_sentences<S: AsRef<[String]>>(
        &self,
        sentences: &[S],
        vocab: &Vocab,
        table: &EmbeddingTable,
        batch_size: usize,
    ) -> Result<Tensor> {
        if sentences.is_empty() {
            return Err(Error::invalid("no sentences to embed"));
        }
        let mut data = Vec::with_capacity(sentences.len() * self.output_dim());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let batch = SentenceBatch::from_tokens(chunk, vocab)?;
            data.extend_from_slice(self.embed(&batch, table)?.data());
        }
        Tensor::matrix(sentences.len(), self.output_dim(), data)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
}

impl EncoderVars {
    /// Six leaves, forward direction first, in [`EncoderParams::tensors`] order.
    pub fn from_leaves(tape: &mut Tape, leaves: &[Var]) -> Result<Self> {
        if leaves.len() != 6 {
            return Err(Error::invalid(format!("encoder needs 6 leaves, got {}", leaves.len())));
        }
        Ok(Self {
            forward: LstmVars::from_leaves(tape, [leaves[0], leaves[1], leaves[2]])?,
            backward: LstmVars::from_leaves(tape, [leaves[3], leaves[4], leaves[5]])?,
        })
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.forward.leaves().into_iter().chain(self.backward.leaves()).collect()
    }
}

/// Hidden states of a batch: `steps[t]` is `B × 2d`, row `b` holding
/// `[→h_t, ←h_t]` for sentence `b`. Rows at masked positions are defined
/// but not valid.
#[derive(Clone, Debug)]
pub struct BatchHidden {
    pub steps: Vec<Var>,
    pub mask: Vec<Vec<bool>>,
}

impl BatchHidden {
    /// The valid hidden rows of sentence `b` as a `T_b × 2d` matrix.
    pub fn sentence(&self, tape: &Tape, b: usize) -> HiddenStates {
        let rows: Vec<&[f64]> = self
            .steps
            .iter()
            .zip(&self.mask[b])
            .filter(|(_, &valid)| valid)
            .map(|(&v, _)| tape.value(v).row(b))
            .collect();
        HiddenStates {
            states: Tensor::from_rows(&rows).expect("at least one valid row"),
        }
    }
}

/// `T × 2d` hidden states of one sentence (valid positions only).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor,
}

fn lookup(batch: &SentenceBatch, table: &EmbeddingTable, t: usize) -> Result<Tensor> {
    let e = table.dim();
    let mut data = Vec::with_capacity(batch.size() * e);
    for row in &batch.tokens {
        let idx = row[t];
        if idx >= table.len() {
            return Err(Error::invalid(format!("token index {idx} outside embedding table")));
        }
        data.extend_from_slice(table.row(idx));
    }
    Tensor::matrix(batch.size(), e, data)
}

fn run_direction(
    tape: &mut Tape,
    inputs: &[Var],
    batch: &SentenceBatch,
    p: &LstmVars,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Option<Var>>> {
    let shape = [batch.size(), p.hidden_dim];
    let mut h = tape.constant(Tensor::zeros(&shape));
    let mut c = tape.constant(Tensor::zeros(&shape));
    let mut out = vec![None; inputs.len()];
    for t in order {
        let keep = batch.valid_at(t);
        let (hn, cn) = lstm_step_on(tape, inputs[t], h, c, p)?;
        if keep.iter().all(|&k| k) {
            h = hn;
            c = cn;
        } else {
            h = tape.blend(hn, h, &keep)?;
            c = tape.blend(cn, c, &keep)?;
        }
        out[t] = Some(h);
    }
    Ok(out)
}

/// Runs both directions over each sentence's valid tokens. The backward
/// direction starts at each sentence's own last token; pad positions never
/// feed either recurrence.
pub fn bilstm(tape: &mut Tape, batch: &SentenceBatch, table: &EmbeddingTable, p: &EncoderVars) -> Result<BatchHidden> {
    let steps = batch.max_len();
    let inputs: Vec<Var> = (0..steps)
        .map(|t| lookup(batch, table, t).map(|x| tape.constant(x)))
        .collect::<Result<_>>()?;
    let fwd = run_direction(tape, &inputs, batch, &p.forward, 0..steps)?;
    let bwd = run_direction(tape, &inputs, batch, &p.backward, (0..steps).rev())?;
    let steps = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| {
            let (f, b) = (f.expect("visited"), b.expect("visited"));
            tape.concat(&[f, b])
        })
        .collect::<Result<_>>()?;
    Ok(BatchHidden {
        steps,
        mask: batch.mask.clone(),
    })
}

pub fn max_pool(tape: &mut Tape, hidden: &BatchHidden) -> Result<Var> {
    tape.max_pool(&hidden.steps, &hidden.mask)
}

/// `bilstm` followed by `max_pool`, keeping the hidden states.
pub fn encode_with_states(tape: &mut Tape, batch: &SentenceBatch, table: &EmbeddingTable, p: &EncoderVars) -> Result<(Var, BatchHidden)> {
    let hidden = bilstm(tape, batch, table, p)?;
    let pooled = max_pool(tape, &hidden)?;
    Ok((pooled, hidden))
}

pub fn encode(tape: &mut Tape, batch: &SentenceBatch, table: &EmbeddingTable, p: &EncoderVars) -> Result<Var> {
    encode_with_states(tape, batch, table, p).map(|(s, _)| s)
}

/// `[s1, s2, s1 - s2, s1 ⊙ s2]` on row-batched embeddings.
pub fn pair_features_on(tape: &mut Tape, s1: Var, s2: Var) -> Result<Var> {
    let diff = tape.sub(s1, s2)?;
    let prod = tape.mul(s1, s2)?;
    tape.concat(&[s1, s2, diff, prod])
}

pub fn pair_features(s1: &[f64], s2: &[f64]) -> Result<Vec<f64>> {
    if s1.len() != s2.len() {
        return Err(Error::Shape {
            op: "pair_features",
            left: vec![s1.len()],
            right: vec![s2.len()],
        });
    }
    let mut out = Vec::with_capacity(4 * s1.len());
    out.extend_from_slice(s1);
    out.extend_from_slice(s2);
    out.extend(s1.iter().zip(s2).map(|(a, b)| a - b));
    out.extend(s1.iter().zip(s2).map(|(a, b)| a * b));
    Ok(out)
}
