//! A text encoder with an optional head, treated as one embedding function.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adaptor::{Adaptor, AdaptorConfig};
use super::layers::Dropout;
use super::text::{TextEncoder, TextEncoderConfig};
use crate::cache::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Module, Param, Rng, Tape, Tensor, Var};
use crate::tokens::{encode_caption, TokenBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    pub encoder: TextEncoder,
    pub head: Option<Adaptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadMeta {
    prefix: String,
    config: AdaptorConfig,
    d_in: usize,
    d_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TowerMeta {
    prefix: String,
    encoder: TextEncoderConfig,
    head: Option<HeadMeta>,
}

impl TextTower {
    pub fn new(encoder: TextEncoder) -> Self {
        Self {
            encoder,
            head: None,
        }
    }

    /// Width of the embeddings produced by [`TextTower::forward`].
    pub fn dim(&self) -> usize {
        self.head
            .as_ref()
            .map_or(self.encoder.config.d_model, |h| h.d_out())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let out = self.encoder.forward(tape, batch, dropout)?;
        match &self.head {
            Some(h) => h.forward(tape, &out),
            None => Ok(out.sentence),
        }
    }

    /// Evaluation-mode embeddings of already-encoded sequences.
    pub fn embed(&self, seqs: &[Vec<u32>], chunk: usize) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(seqs.len() * d);
        for part in seqs.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let v = self.forward(
                &mut tape,
                &TokenBatch::from_sequences(part),
                &mut Dropout::Off,
            )?;
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![seqs.len(), d], data)
    }

    /// Evaluation-mode embeddings of caption contents (prompt token and EOS added).
    pub fn embed_captions<S: AsRef<[u32]>>(&self, captions: &[S], chunk: usize) -> Result<Tensor> {
        let max_len = self.encoder.config.max_len;
        let seqs: Vec<Vec<u32>> = captions
            .iter()
            .map(|c| encode_caption(c.as_ref(), true, max_len))
            .collect();
        self.embed(&seqs, chunk)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = TowerMeta {
            prefix: self.encoder.prefix().to_string(),
            encoder: self.encoder.config.clone(),
            head: self.head.as_ref().map(|h| HeadMeta {
                prefix: head_prefix(h),
                config: h.config.clone(),
                d_in: h.d_in(),
                d_out: h.d_out(),
            }),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_vec_pretty(&meta)?,
        )?;
        Checkpoint::from_module(self).save(&dir.join(format!("{stem}.ckpt")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta_path = dir.join(format!("{stem}.json"));
        let bytes = fs::read(&meta_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", meta_path.display())))?;
        let meta: TowerMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("bad tower metadata: {e}")))?;
        // Weights are overwritten from the checkpoint; the init stream only fixes shapes.
        let mut rng = Rng::new(0);
        let encoder = TextEncoder::new(&meta.prefix, meta.encoder, &mut rng)?;
        let head = match meta.head {
            Some(h) => Some(Adaptor::new(
                &h.prefix, h.config, h.d_in, h.d_out, &mut rng,
            )?),
            None => None,
        };
        let mut tower = Self { encoder, head };
        let ckpt = Checkpoint::load(&dir.join(format!("{stem}.ckpt")))?;
        ckpt.load_into(&mut tower)?;
        Ok(tower)
    }
}

fn head_prefix(h: &Adaptor) -> String {
    let name = &h.proj.w.name;
    name.strip_suffix(".proj.w").unwrap_or(name).to_string()
}

impl Module for TextTower {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        if let Some(h) = &self.head {
            v.extend(h.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        if let Some(h) = &mut self.head {
            v.extend(h.params_mut());
        }
        v
    }
}
