//! Caption-contrastive fine-tuning of the text encoder.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{make_stage1_pairs, CaptionKind, Corpus};
use crate::encoders::{
    Adaptor, AdaptorConfig, AttentionMode, Dropout, LoraConfig, Pooling, TextEncoder, TextTower,
};
use crate::error::{ensure, Error, Result};
use crate::losses::{self, LogitScale};
use crate::numerics::{Module, Param, Rng, Tape, Tensor, Var};
use crate::optim::{warmup_constant, Adam, AdamConfig};
use crate::retrieval::caption2caption_top1;
use crate::tokens::{encode_caption, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Method {
    Mntp,
    SimcseSupervised,
    SimcseUnsupervised,
}

impl Stage1Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage1Method::Mntp => "mntp",
            Stage1Method::SimcseSupervised => "simcse_supervised",
            Stage1Method::SimcseUnsupervised => "simcse_unsupervised",
        }
    }
}

impl std::str::FromStr for Stage1Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown stage-1 method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Trainable {
    Lora,
    FrozenPlusAdaptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    /// Methods to run; they execute as sequential phases, MNTP first.
    pub methods: Vec<Stage1Method>,
    pub trainable: Stage1Trainable,
    pub attention_mode: AttentionMode,
    pub pooling: Pooling,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub mask_rate: f64,
    /// Average both directions in supervised SimCSE.
    pub symmetric: bool,
    pub lora: LoraConfig,
    pub adaptor: AdaptorConfig,
    /// Evaluate caption-to-caption retrieval after every epoch when an eval split is given.
    pub eval_every_epoch: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            methods: vec![Stage1Method::SimcseSupervised],
            trainable: Stage1Trainable::Lora,
            attention_mode: AttentionMode::Bidirectional,
            pooling: Pooling::Avg,
            epochs: 10,
            batch_size: 64,
            lr: 2.5e-3,
            warmup_steps: 30,
            mask_rate: 0.15,
            symmetric: false,
            lora: LoraConfig::default(),
            adaptor: AdaptorConfig {
                depth: 1,
                ..AdaptorConfig::default()
            },
            eval_every_epoch: true,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.methods.is_empty(),
            Config,
            "stage1.methods must name at least one method"
        );
        ensure!(
            self.batch_size >= 2,
            Config,
            "stage1.batch_size must be at least 2"
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "stage1.lr must be positive"
        );
        ensure!(
            self.mask_rate > 0.0 && self.mask_rate < 1.0,
            Config,
            "stage1.mask_rate must lie in (0, 1)"
        );
        ensure!(
            !(self.trainable == Stage1Trainable::FrozenPlusAdaptor
                && self.methods.contains(&Stage1Method::Mntp)),
            Config,
            "mntp trains the encoder itself and needs trainable = lora"
        );
        self.adaptor.validate()
    }

    /// The phases in execution order.
    pub fn phases(&self) -> Vec<Stage1Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        step: usize,
        phase: String,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        phase: String,
        mean_loss: f64,
        eval_top1: Option<f64>,
    },
}

/// Per-step and per-epoch training records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn step(&mut self, step: usize, phase: &str, loss: f64) {
        self.entries.push(LogEntry::Step {
            step,
            phase: phase.to_string(),
            loss,
        });
    }

    pub fn epoch(&mut self, epoch: usize, phase: &str, mean_loss: f64, eval_top1: Option<f64>) {
        self.entries.push(LogEntry::Epoch {
            epoch,
            phase: phase.to_string(),
            mean_loss,
            eval_top1,
        });
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn epoch_means(&self, phase: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Epoch {
                    phase: p,
                    mean_loss,
                    ..
                } if p == phase => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { entries })
    }
}

pub struct Stage1Output {
    pub tower: TextTower,
    pub log: TrainLog,
    /// MNTP steps whose random selection masked nothing (loss defined as 0).
    pub empty_mask_steps: usize,
}

/// Named random streams used by one training run.
pub(crate) struct Streams {
    pub init: Rng,
    pub dropout: Rng,
    pub shuffle: Rng,
    pub mask: Rng,
}

impl Streams {
    pub fn new(seed: u64, scope: &str) -> Self {
        Self {
            init: Rng::stream(seed, "init").fork(scope),
            dropout: Rng::stream(seed, "dropout").fork(scope),
            shuffle: Rng::stream(seed, "shuffle").fork(scope),
            mask: Rng::stream(seed, "dropout").fork(scope).fork("mntp"),
        }
    }
}

pub(crate) fn non_finite(step: usize, phase: &str, ids: &[u64]) -> Error {
    Error::Numeric(format!(
        "non-finite loss at step {step} in phase {phase}; batch caption_ids {ids:?}"
    ))
}

/// Tags a numeric failure raised inside a training step with the step and its captions.
pub(crate) fn numeric_at(e: Error, step: usize, phase: &str, ids: &[u64]) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!(
            "{m} at step {step} in phase {phase}; batch caption_ids {ids:?}"
        )),
        other => other,
    }
}

/// Caption-to-caption top-1: real captions query the dense captions of the same images.
pub fn eval_caption2caption(tower: &TextTower, eval: &Corpus) -> Result<f64> {
    ensure!(
        eval.len() >= 2,
        Data,
        "caption-to-caption evaluation needs at least 2 images"
    );
    let q: Vec<&[u32]> = eval
        .captions_of(CaptionKind::Real)?
        .iter()
        .map(|c| c.tokens.as_slice())
        .collect();
    let g: Vec<&[u32]> = eval
        .captions_of(CaptionKind::Dense)?
        .iter()
        .map(|c| c.tokens.as_slice())
        .collect();
    let qe = tower.embed_captions(&q, 128)?;
    let ge = tower.embed_captions(&g, 128)?;
    caption2caption_top1(&qe, &ge)
}

/// Prepares `encoder` for the configured trainable set and returns the tower to train.
pub fn prepare_tower(
    cfg: &Stage1Config,
    mut encoder: TextEncoder,
    init: &mut Rng,
) -> Result<TextTower> {
    encoder.config.attention_mode = cfg.attention_mode;
    encoder.config.pooling = cfg.pooling;
    match cfg.trainable {
        Stage1Trainable::Lora => {
            if !encoder.has_lora() {
                encoder.attach_lora(cfg.lora.clone(), init)?;
            }
            Ok(TextTower::new(encoder))
        }
        Stage1Trainable::FrozenPlusAdaptor => {
            encoder.set_trainable(false);
            let d = encoder.config.d_model;
            let head = Adaptor::new("s1.adaptor", cfg.adaptor.clone(), d, d, init)?;
            Ok(TextTower {
                encoder,
                head: Some(head),
            })
        }
    }
}

/// Runs every configured phase over `train`, evaluating on `eval` after each epoch.
pub fn train_stage1(
    cfg: &Stage1Config,
    train: &Corpus,
    eval: Option<&Corpus>,
    encoder: TextEncoder,
    seed: u64,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let mut streams = Streams::new(seed, "stage1");
    let mut tower = prepare_tower(cfg, encoder, &mut streams.init)?;
    let mut scale = LogitScale::new("s1.logit_scale");
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut empty_mask_steps = 0;
    let mut epoch_index = 0;
    if cfg.epochs == 0 {
        return Ok(Stage1Output {
            tower,
            log,
            empty_mask_steps,
        });
    }
    // Frozen-encoder embeddings are computed once; only the head trains on top of them.
    let frozen = match (&tower.head, cfg.trainable) {
        (Some(h), Stage1Trainable::FrozenPlusAdaptor) if h.is_pooled() => {
            Some(FrozenFeatures::new(&tower.encoder, train)?)
        }
        _ => None,
    };
    for phase in cfg.phases() {
        let name = phase.as_str();
        let mut opt = Adam::new(AdamConfig::default());
        let mut phase_step = 0;
        for _ in 0..cfg.epochs {
            let mut sum = 0.0;
            let mut n = 0usize;
            for batch in phase_batches(phase, cfg, train, &tower, &mut streams.shuffle)? {
                let mut tape = Tape::new();
                let s = scale.var(&mut tape);
                let mut compute = || -> Result<Var> {
                    Ok(match phase {
                        Stage1Method::Mntp => {
                            let mut d = Dropout::Sample {
                                rate: tower.encoder.config.dropout_rate,
                                rng: &mut streams.dropout,
                            };
                            let tb = TokenBatch::from_sequences(&batch.first);
                            let positions =
                                losses::mntp_select(&tb, cfg.mask_rate, &mut streams.mask)?;
                            let out = losses::mntp_loss_masked(
                                &mut tape,
                                &tower.encoder,
                                &tb,
                                &positions,
                                &mut d,
                            )?;
                            if out.masked == 0 {
                                empty_mask_steps += 1;
                            }
                            out.loss
                        }
                        Stage1Method::SimcseSupervised => {
                            let (a, p) = match &frozen {
                                Some(f) => {
                                    let head =
                                        tower.head.as_ref().expect("frozen features imply a head");
                                    let xa = tape.constant(f.gather(&batch.first_ids)?);
                                    let xp = tape.constant(f.gather(&batch.second_ids)?);
                                    (
                                        head.forward_pooled(&mut tape, xa)?,
                                        head.forward_pooled(&mut tape, xp)?,
                                    )
                                }
                                None => {
                                    let mut d = Dropout::Sample {
                                        rate: tower.encoder.config.dropout_rate,
                                        rng: &mut streams.dropout,
                                    };
                                    let a = tower.forward(
                                        &mut tape,
                                        &TokenBatch::from_sequences(&batch.first),
                                        &mut d,
                                    )?;
                                    let p = tower.forward(
                                        &mut tape,
                                        &TokenBatch::from_sequences(&batch.second),
                                        &mut d,
                                    )?;
                                    (a, p)
                                }
                            };
                            losses::simcse_supervised(&mut tape, a, p, s, cfg.symmetric)?
                        }
                        Stage1Method::SimcseUnsupervised => {
                            let tb = TokenBatch::from_sequences(&batch.first);
                            let out = losses::simcse_unsupervised(
                                &mut tape,
                                &tower.encoder,
                                tower.head.as_ref(),
                                &tb,
                                &mut streams.dropout,
                                s,
                                cfg.symmetric,
                            )?;
                            out.loss
                        }
                    })
                };
                let loss = compute().map_err(|e| numeric_at(e, step, name, &batch.first_ids))?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(non_finite(step, name, &batch.first_ids));
                }
                tape.backward(loss)?;
                let lr = warmup_constant(cfg.lr, cfg.warmup_steps, phase_step);
                let mut params: Vec<&mut Param> = tower.params_mut();
                params.push(&mut scale.log_scale);
                opt.step(params, &tape, lr)?;
                log.step(step, name, value);
                sum += value;
                n += 1;
                step += 1;
                phase_step += 1;
            }
            let eval_top1 = match eval {
                Some(e) if cfg.eval_every_epoch => Some(eval_caption2caption(&tower, e)?),
                _ => None,
            };
            log.epoch(epoch_index, name, sum / n.max(1) as f64, eval_top1);
            epoch_index += 1;
        }
    }
    Ok(Stage1Output {
        tower,
        log,
        empty_mask_steps,
    })
}

struct Stage1Batch {
    first: Vec<Vec<u32>>,
    second: Vec<Vec<u32>>,
    first_ids: Vec<u64>,
    second_ids: Vec<u64>,
}

/// One epoch of batches for `phase`. MNTP and unsupervised SimCSE use single captions
/// (all captions, shuffled); supervised SimCSE uses same-image caption pairs.
fn phase_batches(
    phase: Stage1Method,
    cfg: &Stage1Config,
    train: &Corpus,
    tower: &TextTower,
    shuffle: &mut Rng,
) -> Result<Vec<Stage1Batch>> {
    let max_len = tower.encoder.config.max_len;
    let mut out = Vec::new();
    match phase {
        Stage1Method::SimcseSupervised => {
            let pairs = make_stage1_pairs(train, max_len, shuffle)?;
            for chunk in pairs.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                out.push(Stage1Batch {
                    first: chunk.iter().map(|p| p.first.clone()).collect(),
                    second: chunk.iter().map(|p| p.second.clone()).collect(),
                    first_ids: chunk.iter().map(|p| p.caption_ids.0).collect(),
                    second_ids: chunk.iter().map(|p| p.caption_ids.1).collect(),
                });
            }
        }
        Stage1Method::Mntp | Stage1Method::SimcseUnsupervised => {
            let mut caps: Vec<_> = train
                .manifest
                .records
                .iter()
                .flat_map(|r| r.captions.iter())
                .collect();
            shuffle.shuffle(&mut caps);
            for chunk in caps.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                out.push(Stage1Batch {
                    first: chunk
                        .iter()
                        .map(|c| encode_caption(&c.tokens, true, max_len))
                        .collect(),
                    second: Vec::new(),
                    first_ids: chunk.iter().map(|c| c.caption_id).collect(),
                    second_ids: Vec::new(),
                });
            }
        }
    }
    Ok(out)
}

/// Evaluation-mode sentence embeddings of every training caption, keyed by caption id.
struct FrozenFeatures {
    dim: usize,
    rows: HashMap<u64, Vec<f64>>,
}

impl FrozenFeatures {
    fn new(encoder: &TextEncoder, corpus: &Corpus) -> Result<Self> {
        let caps: Vec<_> = corpus
            .manifest
            .records
            .iter()
            .flat_map(|r| r.captions.iter())
            .collect();
        let seqs: Vec<Vec<u32>> = caps
            .iter()
            .map(|c| encode_caption(&c.tokens, true, encoder.config.max_len))
            .collect();
        let emb = encoder.embed(&seqs, 128)?;
        let rows = caps
            .iter()
            .enumerate()
            .map(|(i, c)| (c.caption_id, emb.row(i).to_vec()))
            .collect();
        Ok(Self {
            dim: encoder.config.d_model,
            rows,
        })
    }

    fn gather(&self, ids: &[u64]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(
                self.rows
                    .get(id)
                    .ok_or_else(|| Error::NotFound(format!("caption_id {id}")))?,
            );
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }
}
