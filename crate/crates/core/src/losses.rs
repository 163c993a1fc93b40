//! Contrastive and masked-prediction objectives.

use serde::{Deserialize, Serialize};

use crate::encoders::{Adaptor, Dropout, Linear, TextEncoder};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Param, Rng, Tape, Tensor, Var};
use crate::tokens::{TokenBatch, MASK};

/// Upper bound on the multiplicative logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// Initial logit scale, `1 / 0.07`.
pub const INIT_LOGIT_SCALE: f64 = 1.0 / 0.07;

/// Learnable logit scale stored in log form; the effective scale is `min(exp(log_s), 100)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitScale {
    pub log_scale: Param,
}

impl LogitScale {
    pub fn new(name: &str) -> Self {
        Self::fixed(name, INIT_LOGIT_SCALE)
    }

    pub fn fixed(name: &str, scale: f64) -> Self {
        Self {
            log_scale: Param::new(name, Tensor::scalar(scale.ln())),
        }
    }

    pub fn value(&self) -> f64 {
        self.log_scale.value.data()[0].exp().min(MAX_LOGIT_SCALE)
    }

    /// Records the clamped scale on `tape` as a one-element node.
    pub fn var(&self, tape: &mut Tape) -> Var {
        let l = tape.param(&self.log_scale);
        let s = tape.exp(l);
        tape.clamp_max(s, MAX_LOGIT_SCALE)
    }
}

/// `[m × n]` matrix of cosine similarities between the rows of `a` and `b`.
pub fn cosine_sim_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    tape.matmul_t(an, false, bn, true)
}

fn scaled_logits(tape: &mut Tape, a: Var, b: Var, scale: Var) -> Result<Var> {
    let n = tape.value(a).rows();
    ensure!(
        n >= 2,
        Usage,
        "contrastive loss needs at least 2 pairs, got {n}"
    );
    ensure!(
        tape.value(b).rows() == n,
        Usage,
        "contrastive inputs have {n} and {} rows",
        tape.value(b).rows()
    );
    let sim = cosine_sim_matrix(tape, a, b)?;
    tape.mul_scalar(sim, scale)
}

fn diag_labels(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean of the image-to-text and text-to-image cross-entropies over `s · cos` logits.
pub fn info_nce_symmetric(tape: &mut Tape, img: Var, txt: Var, scale: Var) -> Result<Var> {
    let logits = scaled_logits(tape, img, txt, scale)?;
    let n = tape.value(logits).rows();
    let labels = diag_labels(n);
    let i2t = tape.cross_entropy(logits, &labels)?;
    let lt = tape.transpose(logits)?;
    let t2i = tape.cross_entropy(lt, &labels)?;
    let sum = tape.add(i2t, t2i)?;
    Ok(tape.scale(sum, 0.5))
}

/// Anchor-to-positive InfoNCE; with `symmetric`, averaged with the reverse direction.
pub fn simcse_supervised(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    scale: Var,
    symmetric: bool,
) -> Result<Var> {
    if symmetric {
        return info_nce_symmetric(tape, anchors, positives, scale);
    }
    let logits = scaled_logits(tape, anchors, positives, scale)?;
    let n = tape.value(logits).rows();
    tape.cross_entropy(logits, &diag_labels(n))
}

/// Result of an unsupervised SimCSE step, including the dropout masks of both passes.
pub struct UnsupervisedSimcse {
    pub loss: Var,
    pub masks: [Vec<Vec<f64>>; 2],
}

/// Two dropout-noised passes over the same batch serve as anchors and positives.
///
/// `head`, when given, maps the pooled sentence embedding (e.g. a trainable adaptor
/// over a frozen encoder).
pub fn simcse_unsupervised(
    tape: &mut Tape,
    enc: &TextEncoder,
    head: Option<&Adaptor>,
    batch: &TokenBatch,
    rng: &mut Rng,
    scale: Var,
    symmetric: bool,
) -> Result<UnsupervisedSimcse> {
    let rate = enc.config.dropout_rate;
    ensure!(
        rate > 0.0,
        Usage,
        "unsupervised SimCSE needs dropout_rate > 0"
    );
    ensure!(
        batch.batch >= 2,
        Usage,
        "contrastive loss needs at least 2 pairs, got {}",
        batch.batch
    );
    let mut pass = |tape: &mut Tape| -> Result<(Var, Vec<Vec<f64>>)> {
        let mut d = Dropout::Record {
            rate,
            rng: &mut *rng,
            masks: Vec::new(),
        };
        let out = enc.forward(tape, batch, &mut d)?;
        let emb = match head {
            Some(h) => h.forward(tape, &out)?,
            None => out.sentence,
        };
        Ok((emb, d.into_masks()))
    };
    let (a, ma) = pass(tape)?;
    let (p, mp) = pass(tape)?;
    let loss = simcse_supervised(tape, a, p, scale, symmetric)?;
    Ok(UnsupervisedSimcse {
        loss,
        masks: [ma, mp],
    })
}

/// Chooses MNTP positions: each unpadded position `t ≥ 1` independently with `mask_rate`.
pub fn mntp_select(
    batch: &TokenBatch,
    mask_rate: f64,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    ensure!(
        mask_rate > 0.0 && mask_rate < 1.0,
        Config,
        "mask_rate must lie in (0, 1), got {mask_rate}"
    );
    let mut picked = Vec::new();
    for b in 0..batch.batch {
        for t in 1..batch.len {
            if batch.get(b, t).1 {
                continue;
            }
            if rng.bernoulli(mask_rate) {
                picked.push((b, t));
            }
        }
    }
    Ok(picked)
}

/// Output of an MNTP step. `masked == 0` means the loss is the constant 0.
pub struct Mntp {
    pub loss: Var,
    pub masked: usize,
}

/// Masked next-token prediction with random positions drawn from `rng`.
pub fn mntp_loss(
    tape: &mut Tape,
    enc: &TextEncoder,
    batch: &TokenBatch,
    mask_rate: f64,
    rng: &mut Rng,
    dropout: &mut Dropout<'_>,
) -> Result<Mntp> {
    let positions = mntp_select(batch, mask_rate, rng)?;
    mntp_loss_masked(tape, enc, batch, &positions, dropout)
}

/// MNTP at explicit `(row, position)` pairs: each selected token is replaced by MASK and
/// predicted from the logits at the preceding position.
pub fn mntp_loss_masked(
    tape: &mut Tape,
    enc: &TextEncoder,
    batch: &TokenBatch,
    positions: &[(usize, usize)],
    dropout: &mut Dropout<'_>,
) -> Result<Mntp> {
    if positions.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(Mntp {
            loss: zero,
            masked: 0,
        });
    }
    let mut masked = batch.clone();
    let mut targets = Vec::with_capacity(positions.len());
    for &(b, t) in positions {
        ensure!(
            b < batch.batch && t < batch.len,
            Usage,
            "mask position ({b}, {t}) outside the batch"
        );
        if t == 0 {
            return Err(Error::Internal("MNTP selection included position 0".into()));
        }
        let (tok, pad) = batch.get(b, t);
        ensure!(!pad, Usage, "mask position ({b}, {t}) is padding");
        targets.push(tok as usize);
        masked.ids[b * batch.len + t] = MASK;
    }
    let out = enc.forward(tape, &masked, dropout)?;
    let mut row_of = vec![usize::MAX; batch.batch * batch.len];
    for (row, &(b, t)) in out.positions.iter().enumerate() {
        row_of[b * batch.len + t] = row;
    }
    let rows: Vec<usize> = positions
        .iter()
        .map(|&(b, t)| row_of[b * batch.len + t - 1])
        .collect();
    let h = tape.gather_rows(out.hidden, &rows)?;
    let logits = enc.lm_logits(tape, h)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(Mntp {
        loss,
        masked: positions.len(),
    })
}

/// Cross-modal training objective variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Method {
    /// Contrast vision against the LLM text tower only.
    A,
    /// Vision against both the LLM and the original text tower.
    B,
    /// As `B`, plus aligning the two text towers with each other.
    C,
    /// As `B`, plus vision against a head over the concatenated text embeddings.
    D,
}

impl Stage2Method {
    pub fn needs_clip_text(self) -> bool {
        self != Stage2Method::A
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage2Method::A => "a",
            Stage2Method::B => "b",
            Stage2Method::C => "c",
            Stage2Method::D => "d",
        }
    }
}

impl std::str::FromStr for Stage2Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Stage2Method::A),
            "b" => Ok(Stage2Method::B),
            "c" => Ok(Stage2Method::C),
            "d" => Ok(Stage2Method::D),
            _ => Err(Error::Config(format!("unknown stage-2 method {s:?}"))),
        }
    }
}

/// Weights of the summed Stage-2 terms, in the order `(llm, vision)`, `(clip_text, vision)`,
/// and the method-specific third term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Weights {
    pub llm_vision: f64,
    pub clip_text_vision: f64,
    pub extra: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            llm_vision: 1.0,
            clip_text_vision: 1.0,
            extra: 1.0,
        }
    }
}

/// Embeddings entering the Stage-2 loss.
///
/// `vision_wide` is the vision embedding lifted to the concat-head width, needed by method `D`.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Embeddings {
    pub llm: Var,
    pub clip_text: Option<Var>,
    pub vision: Var,
    pub vision_wide: Option<Var>,
}

pub fn stage2_loss(
    tape: &mut Tape,
    method: Stage2Method,
    emb: Stage2Embeddings,
    concat_head: Option<&Linear>,
    weights: Stage2Weights,
    scale: Var,
) -> Result<Var> {
    let base = info_nce_symmetric(tape, emb.vision, emb.llm, scale)?;
    if method == Stage2Method::A {
        return Ok(weighted(tape, base, weights.llm_vision));
    }
    let clip = emb.clip_text.ok_or_else(|| {
        Error::Usage(format!(
            "method {} needs clip-text embeddings",
            method.as_str()
        ))
    })?;
    let first = weighted(tape, base, weights.llm_vision);
    let second = info_nce_symmetric(tape, emb.vision, clip, scale)?;
    let second = weighted(tape, second, weights.clip_text_vision);
    let mut total = tape.add(first, second)?;
    let extra = match method {
        Stage2Method::C => Some(info_nce_symmetric(tape, clip, emb.llm, scale)?),
        Stage2Method::D => {
            let head =
                concat_head.ok_or_else(|| Error::Usage("method d needs a concat head".into()))?;
            let wide = emb
                .vision_wide
                .ok_or_else(|| Error::Usage("method d needs a widened vision embedding".into()))?;
            let cat = tape.concat_cols(emb.llm, clip)?;
            let joint = head.forward(tape, cat)?;
            Some(info_nce_symmetric(tape, wide, joint, scale)?)
        }
        _ => None,
    };
    if let Some(e) = extra {
        let e = weighted(tape, e, weights.extra);
        total = tape.add(total, e)?;
    }
    Ok(total)
}

fn weighted(tape: &mut Tape, x: Var, w: f64) -> Var {
    if w == 1.0 {
        x
    } else {
        tape.scale(x, w)
    }
}
