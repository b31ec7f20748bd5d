//! JSON encoder checkpoints.
//!
//! ```text
//! {
//!   "format": "bilstm-max",
//!   "version": 1,
//!   "input_dim": e,
//!   "hidden_dim": d,
//!   "gate_order": "ifgo",
//!   "forward":  { "w_input": [4d*e], "w_hidden": [4d*d], "bias": [4d] },
//!   "backward": { ... }
//! }
//! ```
//!
//! Matrices are flattened row-major; row block `k*d..(k+1)*d` belongs to the
//! k-th gate of `gate_order`. Floats are written with shortest round-trip
//! formatting, so a reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, LstmParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GATE_ORDER: &str = "ifgo";
const FORMAT: &str = "bilstm-max";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Direction {
    w_input: Vec<f64>,
    w_hidden: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    input_dim: usize,
    hidden_dim: usize,
    gate_order: String,
    forward: Direction,
    backward: Direction,
}

impl Direction {
    fn from_params(p: &LstmParams) -> Self {
        Self {
            w_input: p.w_input.data().to_vec(),
            w_hidden: p.w_hidden.data().to_vec(),
            bias: p.bias.data().to_vec(),
        }
    }

    fn into_params(self, e: usize, d: usize) -> Result<LstmParams> {
        let bad = |what: &str| Error::Format(format!("checkpoint {what} has the wrong length"));
        if self.w_input.len() != 4 * d * e {
            return Err(bad("w_input"));
        }
        if self.w_hidden.len() != 4 * d * d {
            return Err(bad("w_hidden"));
        }
        if self.bias.len() != 4 * d {
            return Err(bad("bias"));
        }
        LstmParams::new(
            Tensor::matrix(4 * d, e, self.w_input)?,
            Tensor::matrix(4 * d, d, self.w_hidden)?,
            Tensor::vector(self.bias),
        )
    }
}

impl Checkpoint {
    pub fn from_params(p: &EncoderParams) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            input_dim: p.input_dim(),
            hidden_dim: p.hidden_dim(),
            gate_order: GATE_ORDER.into(),
            forward: Direction::from_params(&p.forward),
            backward: Direction::from_params(&p.backward),
        }
    }

    pub fn into_params(self) -> Result<EncoderParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        if self.gate_order != GATE_ORDER {
            return Err(Error::Format(format!("unsupported gate order {:?}", self.gate_order)));
        }
        let (e, d) = (self.input_dim, self.hidden_dim);
        if e == 0 || d == 0 {
            return Err(Error::Format("checkpoint dimensions must be positive".into()));
        }
        EncoderParams::new(self.forward.into_params(e, d)?, self.backward.into_params(e, d)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    let json = Checkpoint::from_params(params).to_json()?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_params()
}
