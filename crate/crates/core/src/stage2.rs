//! Cross-modal post-training: a frozen (or LoRA-tuned) text tower supervises the vision
//! encoder through a trainable adaptor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{Checkpoint, EmbeddingCache};
use crate::datagen::{make_stage2_batches, Caption, CaptionKind, Corpus};
use crate::encoders::{
    Adaptor, AdaptorConfig, AdaptorKind, Dropout, Linear, LoraConfig, TextEncoder,
    TextEncoderConfig, TextTower, VisionEncoder, VisionEncoderConfig,
};
use crate::error::{ensure, Error, Result};
use crate::losses::{self, LogitScale, Stage2Embeddings, Stage2Method, Stage2Weights};
use crate::numerics::{Module, Param, Rng, Tape, Tensor, Var};
use crate::optim::{cosine, Adam, AdamConfig};
use crate::retrieval::{evaluate_pair_retrieval, RetrievalReport, DEFAULT_KS};
use crate::stage1::{non_finite, numeric_at, Streams, TrainLog};
use crate::tokens::{encode_caption, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPath {
    FrozenPlusAdaptor,
    LoraOnText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub method: Stage2Method,
    pub text_path: TextPath,
    pub offline_cache: bool,
    pub dense_ratio: f64,
    pub adaptor: AdaptorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the final step of the cosine schedule.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub weights: Stage2Weights,
    /// Joint embedding width shared by every head.
    pub joint_dim: usize,
    pub vision: VisionEncoderConfig,
    pub clip_text: TextEncoderConfig,
    /// LoRA attached to the LLM tower when `text_path = lora_on_text`.
    pub lora: LoraConfig,
    pub eval_every_epoch: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            method: Stage2Method::A,
            text_path: TextPath::FrozenPlusAdaptor,
            offline_cache: false,
            dense_ratio: 0.5,
            adaptor: AdaptorConfig::default(),
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            lr_floor: 0.0,
            weight_decay: 0.05,
            weights: Stage2Weights::default(),
            joint_dim: 32,
            vision: VisionEncoderConfig::default(),
            clip_text: TextEncoderConfig::clip_text_surrogate(),
            lora: LoraConfig::default(),
            eval_every_epoch: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !(self.offline_cache && self.text_path != TextPath::FrozenPlusAdaptor),
            Config,
            "offline_cache requires text_path = frozen_plus_adaptor"
        );
        ensure!(
            !(self.offline_cache && self.adaptor.kind == AdaptorKind::Transformer),
            Config,
            "offline_cache stores sentence embeddings; the transformer adaptor needs token states"
        );
        ensure!(
            (0.0..=1.0).contains(&self.dense_ratio),
            Config,
            "stage2.dense_ratio must lie in [0, 1]"
        );
        ensure!(
            self.batch_size >= 2,
            Config,
            "stage2.batch_size must be at least 2"
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "stage2.lr must be positive"
        );
        ensure!(
            self.lr_floor >= 0.0 && self.lr_floor <= self.lr,
            Config,
            "stage2.lr_floor must lie in [0, lr]"
        );
        ensure!(
            self.weight_decay >= 0.0,
            Config,
            "stage2.weight_decay must be non-negative"
        );
        ensure!(
            self.joint_dim >= 1,
            Config,
            "stage2.joint_dim must be positive"
        );
        ensure!(
            self.vision.output_dim == self.joint_dim,
            Config,
            "vision output_dim {} differs from joint_dim {}",
            self.vision.output_dim,
            self.joint_dim
        );
        self.vision.validate()?;
        self.clip_text.validate()?;
        self.adaptor.validate()
    }
}

/// Everything trained in Stage 2, apart from an optionally LoRA-tuned text tower.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub method: Stage2Method,
    pub vision: VisionEncoder,
    /// Adaptor over the LLM tower; absent for the direct fine-tuning baseline.
    pub adaptor: Option<Adaptor>,
    pub clip: Option<TextEncoder>,
    pub clip_proj: Option<Linear>,
    /// Lifts vision embeddings to the concat-head width (method `d`).
    pub vision_wide: Option<Linear>,
    pub concat_head: Option<Linear>,
    pub scale: LogitScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    method: Stage2Method,
    joint_dim: usize,
    vision: VisionEncoderConfig,
    adaptor: Option<(AdaptorConfig, usize)>,
    clip: Option<TextEncoderConfig>,
}

impl Stage2Model {
    /// Fresh model for `method`; `text_dim` is the LLM tower width, `None` for the baseline.
    pub fn new(
        cfg: &Stage2Config,
        method: Stage2Method,
        text_dim: Option<usize>,
        init: &Rng,
    ) -> Result<Self> {
        let d = cfg.joint_dim;
        let vision = VisionEncoder::new("s2.vision", cfg.vision.clone(), &mut init.fork("vision"))?;
        let adaptor = match text_dim {
            Some(t) => Some(Adaptor::new(
                "s2.adaptor",
                cfg.adaptor.clone(),
                t,
                d,
                &mut init.fork("adaptor"),
            )?),
            None => None,
        };
        let with_clip = text_dim.is_none() || method.needs_clip_text();
        let (clip, clip_proj) = if with_clip {
            let mut r = init.fork("clip");
            let enc = TextEncoder::new("s2.clip", cfg.clip_text.clone(), &mut r)?;
            let dc = enc.config.d_model;
            let proj = Linear::new(
                "s2.clip_proj",
                dc,
                d,
                1.0 / (dc as f64).sqrt(),
                true,
                &mut r,
            );
            (Some(enc), Some(proj))
        } else {
            (None, None)
        };
        let (vision_wide, concat_head) = if method == Stage2Method::D && text_dim.is_some() {
            let mut r = init.fork("concat");
            let wide = Linear::new(
                "s2.vision_wide",
                d,
                2 * d,
                1.0 / (d as f64).sqrt(),
                true,
                &mut r,
            );
            let head = Linear::new(
                "s2.concat",
                2 * d,
                2 * d,
                1.0 / (2.0 * d as f64).sqrt(),
                true,
                &mut r,
            );
            (Some(wide), Some(head))
        } else {
            (None, None)
        };
        Ok(Self {
            method,
            vision,
            adaptor,
            clip,
            clip_proj,
            vision_wide,
            concat_head,
            scale: LogitScale::new("s2.logit_scale"),
        })
    }

    pub fn joint_dim(&self) -> usize {
        self.vision.config.output_dim
    }

    /// Names of the text heads this model can be evaluated with.
    pub fn heads(&self) -> Vec<&'static str> {
        let mut h = Vec::new();
        if self.adaptor.is_some() {
            h.push("llm");
        }
        if self.clip.is_some() {
            h.push("clipt");
        }
        if self.concat_head.is_some() {
            h.push("concat");
        }
        h
    }

    /// The head whose metrics stand for the model as a whole.
    pub fn primary_head(&self) -> &'static str {
        if self.adaptor.is_some() {
            "llm"
        } else {
            "clipt"
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = ModelMeta {
            method: self.method,
            joint_dim: self.joint_dim(),
            vision: self.vision.config.clone(),
            adaptor: self.adaptor.as_ref().map(|a| (a.config.clone(), a.d_in())),
            clip: self.clip.as_ref().map(|c| c.config.clone()),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_vec_pretty(&meta)?,
        )?;
        Checkpoint::from_module(self).save(&dir.join(format!("{stem}.ckpt")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let bytes = fs::read(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let meta: ModelMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("bad model metadata: {e}")))?;
        let mut cfg = Stage2Config {
            joint_dim: meta.joint_dim,
            vision: meta.vision,
            ..Stage2Config::default()
        };
        let text_dim = match meta.adaptor {
            Some((a, d_in)) => {
                cfg.adaptor = a;
                Some(d_in)
            }
            None => None,
        };
        if let Some(c) = meta.clip {
            cfg.clip_text = c;
        }
        let mut model = Self::new(&cfg, meta.method, text_dim, &Rng::new(0))?;
        Checkpoint::load(&dir.join(format!("{stem}.ckpt")))?.load_into(&mut model)?;
        Ok(model)
    }
}

impl Module for Stage2Model {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.vision.params();
        if let Some(a) = &self.adaptor {
            v.extend(a.params());
        }
        if let Some(c) = &self.clip {
            v.extend(c.params());
        }
        for l in [&self.clip_proj, &self.vision_wide, &self.concat_head]
            .into_iter()
            .flatten()
        {
            v.extend(l.params());
        }
        v.push(&self.scale.log_scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self {
            vision,
            adaptor,
            clip,
            clip_proj,
            vision_wide,
            concat_head,
            scale,
            ..
        } = self;
        let mut v = vision.params_mut();
        if let Some(a) = adaptor {
            v.extend(a.params_mut());
        }
        if let Some(c) = clip {
            v.extend(c.params_mut());
        }
        for l in [clip_proj, vision_wide, concat_head].into_iter().flatten() {
            v.extend(l.params_mut());
        }
        v.push(&mut scale.log_scale);
        v
    }
}

pub struct Stage2Output {
    pub model: Stage2Model,
    /// The LLM tower after training; differs from the input only under `lora_on_text`.
    pub text: Option<TextTower>,
    pub log: TrainLog,
    /// Wall-clock seconds of each epoch's training steps (evaluation excluded).
    pub epoch_seconds: Vec<f64>,
}

/// Rounds through 32-bit storage; both the cached and the online path consume this value.
pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape unchanged")
}

/// Where the frozen tower's sentence embeddings come from during training.
pub enum TextFeatures<'a> {
    Online,
    Cached(&'a EmbeddingCache),
}

fn caption_index(corpus: &Corpus) -> HashMap<u64, &Caption> {
    corpus
        .manifest
        .records
        .iter()
        .flat_map(|r| r.captions.iter())
        .map(|c| (c.caption_id, c))
        .collect()
}

fn llm_sequences(tower: &TextTower, caps: &[&Caption]) -> Vec<Vec<u32>> {
    caps.iter()
        .map(|c| encode_caption(&c.tokens, true, tower.encoder.config.max_len))
        .collect()
}

fn clip_sequences(clip: &TextEncoder, caps: &[&Caption]) -> Vec<Vec<u32>> {
    caps.iter()
        .map(|c| encode_caption(&c.tokens, false, clip.config.max_len))
        .collect()
}

/// Evaluation-mode sentence embeddings of the frozen tower, rounded to 32-bit storage.
pub fn frozen_text_features(tower: &TextTower, captions: &[&[u32]]) -> Result<Tensor> {
    Ok(quantize(&tower.embed_captions(captions, 128)?))
}

/// Builds the offline cache of frozen-tower sentence embeddings for every caption in `corpus`.
pub fn build_text_cache(tower: &TextTower, corpus: &Corpus) -> Result<crate::cache::CacheBuild> {
    crate::cache::build_cache(corpus, tower.dim(), 128, |caps| {
        tower.embed_captions(caps, 128)
    })
}

/// Trains a fresh Stage-2 model against `text`, the CC-tuned (or raw) LLM tower.
pub fn train_stage2(
    cfg: &Stage2Config,
    train: &Corpus,
    eval: Option<&Corpus>,
    text: &TextTower,
    features: TextFeatures<'_>,
    seed: u64,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if cfg.adaptor.kind == AdaptorKind::Transformer {
        ensure!(
            text.head.is_none(),
            Config,
            "the transformer adaptor needs token states from a tower without a head"
        );
    }
    if let TextFeatures::Cached(c) = features {
        ensure!(
            c.dim() == text.dim(),
            Dimension,
            "cache stores {}-dimensional embeddings but the text tower produces {}",
            c.dim(),
            text.dim()
        );
    }
    let streams = Streams::new(seed, "stage2");
    let model = Stage2Model::new(cfg, cfg.method, Some(text.dim()), &streams.init)?;
    let mut tower = text.clone();
    if cfg.text_path == TextPath::LoraOnText {
        if tower.encoder.has_lora() {
            // Stage-1 factors keep their values but train again here.
            for p in tower.encoder.lora_params_mut() {
                p.trainable = true;
            }
        } else {
            tower
                .encoder
                .attach_lora(cfg.lora.clone(), &mut streams.init.fork("text_lora"))?;
        }
        if let Some(h) = &mut tower.head {
            h.set_trainable(false);
        }
    } else {
        tower.set_trainable(false);
    }
    let out = run(cfg, train, eval, Some(tower), model, features, streams)?;
    Ok(out)
}

/// Direct fine-tuning of the CLIP-T surrogate and vision encoder with the plain CLIP loss.
pub fn train_baseline(
    cfg: &Stage2Config,
    train: &Corpus,
    eval: Option<&Corpus>,
    seed: u64,
) -> Result<Stage2Output> {
    let cfg = Stage2Config {
        method: Stage2Method::A,
        offline_cache: false,
        ..cfg.clone()
    };
    cfg.validate()?;
    let streams = Streams::new(seed, "stage2");
    let model = Stage2Model::new(&cfg, Stage2Method::A, None, &streams.init)?;
    run(
        &cfg,
        train,
        eval,
        None,
        model,
        TextFeatures::Online,
        streams,
    )
}

fn run(
    cfg: &Stage2Config,
    train: &Corpus,
    eval: Option<&Corpus>,
    mut tower: Option<TextTower>,
    mut model: Stage2Model,
    features: TextFeatures<'_>,
    mut streams: Streams,
) -> Result<Stage2Output> {
    let mut log = TrainLog::default();
    let mut epoch_seconds = Vec::new();
    let caps = caption_index(train);
    let n_batches = train.len() / cfg.batch_size;
    let total = cfg.epochs * n_batches;
    let mut opt = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    // The logit scale is not decayed.
    let mut scale_opt = Adam::new(AdamConfig::default());
    let mut text_dropout = streams.dropout.fork("text");
    let mut clip_dropout = streams.dropout.fork("clip");
    let frozen = tower
        .as_ref()
        .is_some_and(|t| t.params().iter().all(|p| !p.trainable));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches =
            make_stage2_batches(train, cfg.dense_ratio, cfg.batch_size, &mut streams.shuffle)?;
        let t0 = Instant::now();
        let mut sum = 0.0;
        for batch in &batches {
            let bc: Vec<&Caption> = batch
                .caption_ids
                .iter()
                .map(|id| {
                    caps.get(id)
                        .copied()
                        .ok_or_else(|| Error::NotFound(format!("caption_id {id}")))
                })
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let mut compute = || -> Result<Var> {
                let x = tape.constant(train.latent_tensor(&batch.image_indices));
                let vision = model.vision.forward(&mut tape, x)?;
                let llm = match (&tower, &model.adaptor) {
                    (Some(tw), Some(adaptor)) => Some(llm_branch(
                        &mut tape,
                        tw,
                        adaptor,
                        &bc,
                        &batch.caption_ids,
                        &features,
                        frozen,
                        &mut text_dropout,
                    )?),
                    _ => None,
                };
                let clip = match (&model.clip, &model.clip_proj) {
                    (Some(enc), Some(proj)) => {
                        let tb = TokenBatch::from_sequences(&clip_sequences(enc, &bc));
                        let mut d = Dropout::Sample {
                            rate: enc.config.dropout_rate,
                            rng: &mut clip_dropout,
                        };
                        let s = enc.forward(&mut tape, &tb, &mut d)?.sentence;
                        Some(proj.forward(&mut tape, s)?)
                    }
                    _ => None,
                };
                let vision_wide = match &model.vision_wide {
                    Some(l) => Some(l.forward(&mut tape, vision)?),
                    None => None,
                };
                let s = model.scale.var(&mut tape);
                let loss = match llm {
                    Some(llm) => {
                        let emb = Stage2Embeddings {
                            llm,
                            clip_text: clip,
                            vision,
                            vision_wide,
                        };
                        losses::stage2_loss(
                            &mut tape,
                            model.method,
                            emb,
                            model.concat_head.as_ref(),
                            cfg.weights,
                            s,
                        )?
                    }
                    None => {
                        let clip = clip.ok_or_else(|| {
                            Error::Internal("baseline without a text branch".into())
                        })?;
                        losses::info_nce_symmetric(&mut tape, vision, clip, s)?
                    }
                };
                Ok(loss)
            };
            let loss = compute().map_err(|e| numeric_at(e, step, "stage2", &batch.caption_ids))?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite(step, "stage2", &batch.caption_ids));
            }
            tape.backward(loss)?;
            let lr = cosine(cfg.lr, cfg.lr_floor, total, step);
            let Stage2Model { scale, .. } = &mut model;
            scale_opt.step([&mut scale.log_scale], &tape, lr)?;
            let mut params: Vec<&mut Param> = model.params_mut();
            params.retain(|p| p.name != "s2.logit_scale");
            if let Some(tw) = tower.as_mut() {
                params.extend(tw.params_mut());
            }
            opt.step(params, &tape, lr)?;
            log.step(step, "stage2", value);
            sum += value;
            step += 1;
        }
        epoch_seconds.push(t0.elapsed().as_secs_f64());
        let eval_top1 = match eval {
            Some(e) if cfg.eval_every_epoch => {
                let head = model.primary_head();
                Some(evaluate_head(&model, tower.as_ref(), e, head)?.average())
            }
            _ => None,
        };
        log.epoch(
            epoch,
            "stage2",
            sum / batches.len().max(1) as f64,
            eval_top1,
        );
    }
    Ok(Stage2Output {
        model,
        text: tower,
        log,
        epoch_seconds,
    })
}

#[allow(clippy::too_many_arguments)]
fn llm_branch(
    tape: &mut Tape,
    tower: &TextTower,
    adaptor: &Adaptor,
    caps: &[&Caption],
    ids: &[u64],
    features: &TextFeatures<'_>,
    frozen: bool,
    dropout_rng: &mut Rng,
) -> Result<Var> {
    if frozen && adaptor.is_pooled() {
        let f = match features {
            TextFeatures::Cached(cache) => cache.gather(ids)?,
            TextFeatures::Online => {
                let toks: Vec<&[u32]> = caps.iter().map(|c| c.tokens.as_slice()).collect();
                frozen_text_features(tower, &toks)?
            }
        };
        let x = tape.constant(f);
        return adaptor.forward_pooled(tape, x);
    }
    let tb = TokenBatch::from_sequences(&llm_sequences(tower, caps));
    let mut d = if frozen {
        Dropout::Off
    } else {
        Dropout::Sample {
            rate: tower.encoder.config.dropout_rate,
            rng: dropout_rng,
        }
    };
    if adaptor.is_pooled() {
        let s = tower.forward(tape, &tb, &mut d)?;
        adaptor.forward_pooled(tape, s)
    } else {
        let out = tower.encoder.forward(tape, &tb, &mut d)?;
        adaptor.forward(tape, &out)
    }
}

/// Image and text embeddings of `eval` for one head, paired row by row.
fn head_embeddings(
    model: &Stage2Model,
    tower: Option<&TextTower>,
    eval: &Corpus,
    head: &str,
    kind: CaptionKind,
) -> Result<(Tensor, Tensor)> {
    let caps = eval.captions_of(kind)?;
    let latents = eval.all_latents();
    let mut img = Vec::new();
    let mut txt = Vec::new();
    for part in (0..eval.len()).collect::<Vec<_>>().chunks(128) {
        let bc: Vec<&Caption> = part.iter().map(|&i| caps[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![part.len(), eval.manifest.latent_dim],
            part.iter().flat_map(|&i| latents.row(i).to_vec()).collect(),
        )?);
        let v = model.vision.forward(&mut tape, x)?;
        let llm = |tape: &mut Tape| -> Result<Var> {
            let tw =
                tower.ok_or_else(|| Error::Usage("the llm head needs the text tower".into()))?;
            let adaptor = model
                .adaptor
                .as_ref()
                .ok_or_else(|| Error::Usage("model has no llm adaptor".into()))?;
            let ids: Vec<u64> = bc.iter().map(|c| c.caption_id).collect();
            // Evaluation runs the tower as frozen: no dropout, 32-bit rounded features.
            let mut unused = Rng::new(0);
            llm_branch(
                tape,
                tw,
                adaptor,
                &bc,
                &ids,
                &TextFeatures::Online,
                true,
                &mut unused,
            )
        };
        let clip = |tape: &mut Tape| -> Result<Var> {
            let enc = model
                .clip
                .as_ref()
                .ok_or_else(|| Error::Usage("model has no clip-text branch".into()))?;
            let proj = model
                .clip_proj
                .as_ref()
                .ok_or_else(|| Error::Internal("clip branch without projector".into()))?;
            let tb = TokenBatch::from_sequences(&clip_sequences(enc, &bc));
            let s = enc.forward(tape, &tb, &mut Dropout::Off)?.sentence;
            proj.forward(tape, s)
        };
        let (i, t) = match head {
            "llm" => (v, llm(&mut tape)?),
            "clipt" => (v, clip(&mut tape)?),
            "concat" => {
                let wide = model
                    .vision_wide
                    .as_ref()
                    .ok_or_else(|| Error::Usage("model has no concat head".into()))?;
                let cat_head = model
                    .concat_head
                    .as_ref()
                    .ok_or_else(|| Error::Usage("model has no concat head".into()))?;
                let a = llm(&mut tape)?;
                let b = clip(&mut tape)?;
                let cat = tape.concat_cols(a, b)?;
                let j = cat_head.forward(&mut tape, cat)?;
                (wide.forward(&mut tape, v)?, j)
            }
            other => {
                return Err(Error::Usage(format!(
                    "unknown head {other:?}; expected llm, clipt or concat"
                )))
            }
        };
        img.push(tape.value(i).clone());
        txt.push(tape.value(t).clone());
    }
    Ok((stack(img)?, stack(txt)?))
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let rows = parts.iter().map(|t| t.rows()).sum();
    Tensor::new(
        vec![rows, cols],
        parts.into_iter().flat_map(|t| t.into_data()).collect(),
    )
}

/// Short-caption (real) and long-caption (dense) retrieval for one text head.
pub fn evaluate_head(
    model: &Stage2Model,
    tower: Option<&TextTower>,
    eval: &Corpus,
    head: &str,
) -> Result<RetrievalReport> {
    let mut tasks = Vec::new();
    for (name, kind) in [("short", CaptionKind::Real), ("long", CaptionKind::Dense)] {
        let (img, txt) = head_embeddings(model, tower, eval, head, kind)?;
        tasks.push(evaluate_pair_retrieval(name, &img, &txt, &DEFAULT_KS)?);
    }
    Ok(RetrievalReport::new(tasks))
}

/// One report per text head, in [`Stage2Model::heads`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: String,
    pub report: RetrievalReport,
}

pub fn evaluate_all_heads(
    model: &Stage2Model,
    tower: Option<&TextTower>,
    eval: &Corpus,
) -> Result<Vec<HeadReport>> {
    model
        .heads()
        .into_iter()
        .map(|h| {
            Ok(HeadReport {
                head: h.to_string(),
                report: evaluate_head(model, tower, eval, h)?,
            })
        })
        .collect()
}
