use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Param, Rng, Tape, Var};

/// Affine map `y = x W + b` with `W` stored `[d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w: Param::normal(format!("{prefix}.w"), &[d_in, d_out], std, rng),
            b: bias.then(|| Param::zeros(format!("{prefix}.b"), &[d_out])),
        }
    }

    pub fn zeros(prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: Param::zeros(format!("{prefix}.w"), &[d_in, d_out]),
            b: bias.then(|| Param::zeros(format!("{prefix}.b"), &[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let y = tape.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.w).chain(self.b.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.w)
            .chain(self.b.as_mut())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            gain: Param::ones(format!("{prefix}.g"), &[d]),
            bias: Param::zeros(format!("{prefix}.b"), &[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Dropout applied while recording a forward pass.
///
/// `Record` keeps every sampled mask so the same pass can be replayed exactly.
pub enum Dropout<'r> {
    Off,
    Sample {
        rate: f64,
        rng: &'r mut Rng,
    },
    Record {
        rate: f64,
        rng: &'r mut Rng,
        masks: Vec<Vec<f64>>,
    },
    Replay {
        masks: &'r [Vec<f64>],
        next: usize,
    },
}

impl<'r> Dropout<'r> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        let mask = match self {
            Dropout::Off => return Ok(x),
            Dropout::Sample { rate, rng } => {
                if *rate <= 0.0 {
                    return Ok(x);
                }
                sample_mask(n, *rate, rng)
            }
            Dropout::Record { rate, rng, masks } => {
                let m = if *rate <= 0.0 {
                    vec![1.0; n]
                } else {
                    sample_mask(n, *rate, rng)
                };
                masks.push(m.clone());
                m
            }
            Dropout::Replay { masks, next } => {
                let m = masks
                    .get(*next)
                    .ok_or_else(|| crate::Error::Usage("dropout replay ran out of masks".into()))?
                    .clone();
                *next += 1;
                m
            }
        };
        tape.mul_const(x, mask)
    }

    pub fn into_masks(self) -> Vec<Vec<f64>> {
        match self {
            Dropout::Record { masks, .. } => masks,
            _ => Vec::new(),
        }
    }
}

fn sample_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Eos,
}
