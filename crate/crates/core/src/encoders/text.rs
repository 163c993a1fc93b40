//! Transformer text encoder used both as the language-model surrogate and as
//! the original contrastive text tower.

use serde::{Deserialize, Serialize};

use super::layers::{AttentionMode, Dropout, LayerNorm, Linear, Pooling};
use crate::error::{ensure, Result};
use crate::numerics::{Module, Param, Rng, Segment, Tape, Tensor, Var};
use crate::tokens::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl LoraTarget {
    fn tag(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
            LoraTarget::FfnUp => "ffn_up",
            LoraTarget::FfnDown => "ffn_down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec![
                LoraTarget::Query,
                LoraTarget::Key,
                LoraTarget::Value,
                LoraTarget::Output,
            ],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub attention_mode: AttentionMode,
    pub pooling: Pooling,
    pub dropout_rate: f64,
    /// Standard deviation of the positional embedding init (token embeddings use 1).
    pub positional_init_std: f64,
    pub lora: Option<LoraConfig>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self::llm_surrogate()
    }
}

impl TextEncoderConfig {
    pub fn llm_surrogate() -> Self {
        Self {
            vocab_size: 256,
            max_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            attention_mode: AttentionMode::Causal,
            pooling: Pooling::Avg,
            dropout_rate: 0.1,
            positional_init_std: 0.3,
            lora: None,
        }
    }

    pub fn clip_text_surrogate() -> Self {
        Self {
            d_model: 32,
            n_layers: 1,
            ..Self::llm_surrogate()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.vocab_size > crate::tokens::N_RESERVED as usize,
            Config,
            "vocab_size too small"
        );
        ensure!(self.max_len >= 2, Config, "max_len must be at least 2");
        ensure!(
            self.n_heads >= 1 && self.d_model % self.n_heads == 0,
            Config,
            "d_model must be divisible by n_heads"
        );
        ensure!(
            self.n_layers >= 1 && self.ffn_mult >= 1,
            Config,
            "n_layers and ffn_mult must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            Config,
            "dropout_rate must lie in [0, 1)"
        );
        ensure!(
            self.positional_init_std >= 0.0 && self.positional_init_std.is_finite(),
            Config,
            "positional_init_std must be >= 0"
        );
        if let Some(l) = &self.lora {
            ensure!(
                l.rank >= 1 && l.alpha > 0.0,
                Config,
                "LoRA needs rank >= 1 and alpha > 0"
            );
            ensure!(
                !l.targets.is_empty(),
                Config,
                "LoRA needs at least one target"
            );
        }
        Ok(())
    }
}

/// Low-rank factor pair: the weight delta is `scaling · (B A)ᵀ` in `[d_in × d_out]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Param,
    pub b: Param,
}

#[derive(Debug, Clone, PartialEq)]
struct Lora {
    target: LoraTarget,
    pair: LoraPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextLayer {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
    lora: Vec<Lora>,
}

impl TextLayer {
    fn base(&self, t: LoraTarget) -> &Linear {
        match t {
            LoraTarget::Query => &self.wq,
            LoraTarget::Key => &self.wk,
            LoraTarget::Value => &self.wv,
            LoraTarget::Output => &self.wo,
            LoraTarget::FfnUp => &self.ffn_up,
            LoraTarget::FfnDown => &self.ffn_down,
        }
    }

    fn base_mut(&mut self, t: LoraTarget) -> &mut Linear {
        match t {
            LoraTarget::Query => &mut self.wq,
            LoraTarget::Key => &mut self.wk,
            LoraTarget::Value => &mut self.wv,
            LoraTarget::Output => &mut self.wo,
            LoraTarget::FfnUp => &mut self.ffn_up,
            LoraTarget::FfnDown => &mut self.ffn_down,
        }
    }

    fn lora_for(&self, t: LoraTarget) -> Option<&LoraPair> {
        self.lora.iter().find(|l| l.target == t).map(|l| &l.pair)
    }

    fn base_params(&self) -> Vec<&Param> {
        let mut v = self.ln1.params();
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            v.extend(l.params());
        }
        v.extend(self.ln2.params());
        v.extend(self.ffn_up.params());
        v.extend(self.ffn_down.params());
        v
    }

    fn base_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln1.params_mut();
        v.extend(self.wq.params_mut());
        v.extend(self.wk.params_mut());
        v.extend(self.wv.params_mut());
        v.extend(self.wo.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ffn_up.params_mut());
        v.extend(self.ffn_down.params_mut());
        v
    }
}

/// Output of a text forward pass over a packed batch.
#[derive(Debug, Clone)]
pub struct TextOutput {
    /// Final-layer token states, packed `[n_tokens × d_model]` (padding removed).
    pub hidden: Var,
    /// Pooled sentence embeddings `[B × d_model]`.
    pub sentence: Var,
    pub segments: Vec<Segment>,
    /// Original `(b, t)` of every packed row.
    pub positions: Vec<(usize, usize)>,
    pub batch: usize,
    pub len: usize,
}

impl TextOutput {
    /// Materializes the hidden states as `[B × T × d]`, zero at padded positions.
    pub fn padded_hidden(&self, tape: &Tape) -> Tensor {
        let h = tape.value(self.hidden);
        let d = h.cols();
        let mut out = Tensor::zeros(&[self.batch, self.len, d]);
        for (row, &(b, t)) in self.positions.iter().enumerate() {
            let dst = (b * self.len + t) * d;
            out.data_mut()[dst..dst + d].copy_from_slice(h.row(row));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    prefix: String,
    pub token_embedding: Param,
    pub positional_embedding: Param,
    pub layers: Vec<TextLayer>,
    pub ln_final: LayerNorm,
    /// Vocabulary head used by masked next-token prediction.
    pub lm_head: Linear,
}

impl TextEncoder {
    /// Random init; LoRA factors (when configured) start with `A` small uniform and `B = 0`.
    pub fn new(prefix: &str, config: TextEncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = d * config.ffn_mult;
        let w_std = 1.0 / (d as f64).sqrt();
        let token_embedding = Param::normal(
            format!("{prefix}.tok_emb"),
            &[config.vocab_size, d],
            1.0,
            rng,
        );
        let positional_embedding = Param::normal(
            format!("{prefix}.pos_emb"),
            &[config.max_len, d],
            config.positional_init_std,
            rng,
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("{prefix}.layers.{i}");
            layers.push(TextLayer {
                ln1: LayerNorm::new(&format!("{p}.ln1"), d),
                wq: Linear::new(&format!("{p}.q"), d, d, w_std, false, rng),
                wk: Linear::new(&format!("{p}.k"), d, d, w_std, false, rng),
                wv: Linear::new(&format!("{p}.v"), d, d, w_std, false, rng),
                wo: Linear::new(&format!("{p}.o"), d, d, w_std, false, rng),
                ln2: LayerNorm::new(&format!("{p}.ln2"), d),
                ffn_up: Linear::new(&format!("{p}.ffn_up"), d, h, w_std, true, rng),
                ffn_down: Linear::new(
                    &format!("{p}.ffn_down"),
                    h,
                    d,
                    1.0 / (h as f64).sqrt(),
                    true,
                    rng,
                ),
                lora: Vec::new(),
            });
        }
        let mut enc = Self {
            ln_final: LayerNorm::new(&format!("{prefix}.ln_f"), d),
            lm_head: Linear::new(
                &format!("{prefix}.lm_head"),
                d,
                config.vocab_size,
                w_std,
                true,
                rng,
            ),
            prefix: prefix.to_string(),
            config,
            token_embedding,
            positional_embedding,
            layers,
        };
        if let Some(l) = enc.config.lora.clone() {
            enc.config.lora = None;
            enc.attach_lora(l, rng)?;
        }
        Ok(enc)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn has_lora(&self) -> bool {
        self.config.lora.is_some()
    }

    /// Adds fresh LoRA factors and freezes every base weight.
    pub fn attach_lora(&mut self, cfg: LoraConfig, rng: &mut Rng) -> Result<()> {
        ensure!(
            !self.has_lora(),
            Usage,
            "encoder already carries LoRA factors"
        );
        ensure!(
            cfg.rank >= 1 && cfg.alpha > 0.0 && !cfg.targets.is_empty(),
            Config,
            "invalid LoRA config"
        );
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for &t in &targets {
                let base = layer.base(t);
                let (d_in, d_out) = (base.d_in(), base.d_out());
                let bound = 1.0 / (d_in as f64).sqrt();
                let name = format!("{}.layers.{i}.{}.lora", self.prefix, t.tag());
                let pair = LoraPair {
                    a: Param::uniform(format!("{name}_a"), &[cfg.rank, d_in], bound, rng),
                    b: Param::zeros(format!("{name}_b"), &[d_out, cfg.rank]),
                };
                layer.lora.push(Lora { target: t, pair });
            }
        }
        self.config.lora = Some(LoraConfig { targets, ..cfg });
        for p in self.base_params_mut() {
            p.trainable = false;
        }
        Ok(())
    }

    /// All non-LoRA weights.
    pub fn base_params(&self) -> Vec<&Param> {
        let mut v = vec![&self.token_embedding, &self.positional_embedding];
        for l in &self.layers {
            v.extend(l.base_params());
        }
        v.extend(self.ln_final.params());
        v.extend(self.lm_head.params());
        v
    }

    pub fn base_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for l in &mut self.layers {
            v.extend(l.base_params_mut());
        }
        v.extend(self.ln_final.params_mut());
        v.extend(self.lm_head.params_mut());
        v
    }

    pub fn lora_params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| l.lora.iter().flat_map(|x| [&x.pair.a, &x.pair.b]))
            .collect()
    }

    pub fn lora_params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                l.lora
                    .iter_mut()
                    .flat_map(|x| [&mut x.pair.a, &mut x.pair.b])
            })
            .collect()
    }

    pub fn base_checksum(&self) -> u64 {
        crate::numerics::checksum(self.base_params().into_iter().map(|p| &p.value))
    }

    /// Mutable access to one LoRA pair (layer, target), if present.
    pub fn lora_pair_mut(&mut self, layer: usize, target: LoraTarget) -> Option<&mut LoraPair> {
        self.layers
            .get_mut(layer)?
            .lora
            .iter_mut()
            .find(|l| l.target == target)
            .map(|l| &mut l.pair)
    }

    /// Folds `scaling · (B A)ᵀ` into each targeted weight and drops the factors.
    ///
    /// The merged weights keep the trainable flag they had before LoRA was attached
    /// turned off; callers decide what to train next.
    pub fn lora_merge(&self) -> Result<TextEncoder> {
        let cfg = self
            .config
            .lora
            .clone()
            .ok_or_else(|| crate::Error::Usage("encoder has no LoRA to merge".into()))?;
        let s = cfg.scaling();
        let mut out = self.clone();
        for layer in &mut out.layers {
            let loras = std::mem::take(&mut layer.lora);
            for l in loras {
                let delta = lora_delta(&l.pair, s)?;
                let w = &mut layer.base_mut(l.target).w.value;
                for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
            }
        }
        out.config.lora = None;
        Ok(out)
    }

    fn lin(&self, tape: &mut Tape, layer: &TextLayer, t: LoraTarget, x: Var) -> Result<Var> {
        let y = layer.base(t).forward(tape, x)?;
        match (layer.lora_for(t), &self.config.lora) {
            (Some(pair), Some(cfg)) => {
                let a = tape.param(&pair.a);
                let b = tape.param(&pair.b);
                let xa = tape.matmul_t(x, false, a, true)?;
                let xab = tape.matmul_t(xa, false, b, true)?;
                let scaled = tape.scale(xab, cfg.scaling());
                tape.add(y, scaled)
            }
            _ => Ok(y),
        }
    }

    /// Packs the unpadded positions of `batch` and validates them.
    fn pack(
        &self,
        batch: &TokenBatch,
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<Segment>, Vec<(usize, usize)>)> {
        ensure!(batch.batch >= 1, Input, "empty batch");
        ensure!(
            batch.len <= self.config.max_len,
            Input,
            "sequence length {} exceeds max_len {}",
            batch.len,
            self.config.max_len
        );
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::with_capacity(batch.batch);
        let mut where_ = Vec::new();
        for b in 0..batch.batch {
            let start = ids.len();
            for t in 0..batch.len {
                let (tok, padded) = batch.get(b, t);
                if padded {
                    continue;
                }
                ensure!(
                    (tok as usize) < self.config.vocab_size,
                    Input,
                    "token id {tok} out of vocabulary"
                );
                ids.push(tok as usize);
                pos.push(t);
                where_.push((b, t));
            }
            ensure!(ids.len() > start, Input, "row {b} has no unpadded tokens");
            segs.push(Segment {
                start,
                len: ids.len() - start,
            });
        }
        Ok((ids, pos, segs, where_))
    }

    /// Runs the encoder; dropout is applied wherever `dropout` is not `Off`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<TextOutput> {
        let (ids, pos, segs, positions) = self.pack(batch)?;
        let tok = tape.param(&self.token_embedding);
        let pe = tape.param(&self.positional_embedding);
        let te = tape.gather_rows(tok, &ids)?;
        let pe = tape.gather_rows(pe, &pos)?;
        let mut x = tape.add(te, pe)?;
        x = dropout.apply(tape, x)?;
        let causal = self.config.attention_mode == AttentionMode::Causal;
        for layer in &self.layers {
            let h = layer.ln1.forward(tape, x)?;
            let q = self.lin(tape, layer, LoraTarget::Query, h)?;
            let k = self.lin(tape, layer, LoraTarget::Key, h)?;
            let v = self.lin(tape, layer, LoraTarget::Value, h)?;
            let a = tape.attention(q, k, v, &segs, self.config.n_heads, causal)?;
            let o = self.lin(tape, layer, LoraTarget::Output, a)?;
            let o = dropout.apply(tape, o)?;
            x = tape.add(x, o)?;
            let h = layer.ln2.forward(tape, x)?;
            let u = self.lin(tape, layer, LoraTarget::FfnUp, h)?;
            let u = tape.gelu(u);
            let f = self.lin(tape, layer, LoraTarget::FfnDown, u)?;
            let f = dropout.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        let hidden = self.ln_final.forward(tape, x)?;
        let sentence = match self.config.pooling {
            Pooling::Avg => tape.segment_mean(hidden, &segs)?,
            Pooling::Eos => {
                let last: Vec<usize> = segs.iter().map(|s| s.start + s.len - 1).collect();
                tape.gather_rows(hidden, &last)?
            }
        };
        Ok(TextOutput {
            hidden,
            sentence,
            segments: segs,
            positions,
            batch: batch.batch,
            len: batch.len,
        })
    }

    /// Convenience wrapper: dropout sampled from `rng` when `train_mode`, off otherwise.
    pub fn forward_mode(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        train_mode: bool,
        rng: &mut Rng,
    ) -> Result<TextOutput> {
        let mut d = if train_mode {
            Dropout::Sample {
                rate: self.config.dropout_rate,
                rng,
            }
        } else {
            Dropout::Off
        };
        self.forward(tape, batch, &mut d)
    }

    /// Vocabulary logits `[n_tokens × vocab]` from packed hidden states.
    pub fn lm_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        self.lm_head.forward(tape, hidden)
    }

    /// Evaluation-mode sentence embeddings for a list of token sequences, in chunks.
    pub fn embed(&self, seqs: &[Vec<u32>], chunk: usize) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(seqs.len() * d);
        for part in seqs.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let batch = TokenBatch::from_sequences(part);
            let out = self.forward(&mut tape, &batch, &mut Dropout::Off)?;
            data.extend_from_slice(tape.value(out.sentence).data());
        }
        Tensor::new(vec![seqs.len(), d], data)
    }
}

/// `scaling · (B A)ᵀ` as a `[d_in × d_out]` tensor.
pub fn lora_delta(pair: &LoraPair, scaling: f64) -> Result<Tensor> {
    let ba = pair.b.value.matmul(&pair.a.value)?;
    let (d_out, d_in) = ba.as_matrix()?;
    let mut t = vec![0.0; d_in * d_out];
    for i in 0..d_out {
        for j in 0..d_in {
            t[j * d_out + i] = scaling * ba.data()[i * d_in + j];
        }
    }
    Tensor::new(vec![d_in, d_out], t)
}

impl Module for TextEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.base_params();
        v.extend(self.lora_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self {
            token_embedding,
            positional_embedding,
            layers,
            ln_final,
            lm_head,
            ..
        } = self;
        let mut v: Vec<&mut Param> = vec![token_embedding, positional_embedding];
        let mut lora = Vec::new();
        for l in layers {
            let TextLayer {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ffn_up,
                ffn_down,
                lora: pairs,
            } = l;
            v.extend(ln1.params_mut());
            for lin in [wq, wk, wv, wo] {
                v.extend(lin.params_mut());
            }
            v.extend(ln2.params_mut());
            v.extend(ffn_up.params_mut());
            v.extend(ffn_down.params_mut());
            for x in pairs {
                lora.push(&mut x.pair.a);
                lora.push(&mut x.pair.b);
            }
        }
        v.extend(ln_final.params_mut());
        v.extend(lm_head.params_mut());
        v.extend(lora);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: AttentionMode, pooling: Pooling) -> TextEncoder {
        let cfg = TextEncoderConfig {
            vocab_size: 16,
            max_len: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            attention_mode: mode,
            pooling,
            dropout_rate: 0.1,
            ..TextEncoderConfig::default()
        };
        TextEncoder::new("t", cfg, &mut Rng::new(1)).unwrap()
    }

    fn run(enc: &TextEncoder, seqs: &[Vec<u32>]) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let out = enc
            .forward(
                &mut tape,
                &TokenBatch::from_sequences(seqs),
                &mut Dropout::Off,
            )
            .unwrap();
        (out.padded_hidden(&tape), tape.value(out.sentence).clone())
    }

    #[test]
    fn single_token_pooling_modes_agree() {
        for pooling in [Pooling::Avg, Pooling::Eos] {
            let enc = small(AttentionMode::Bidirectional, pooling);
            let (h, s) = run(&enc, &[vec![5], vec![9]]);
            assert_eq!(s.data(), h.data());
        }
    }

    #[test]
    fn avg_pool_is_mean_of_two_states() {
        let enc = small(AttentionMode::Bidirectional, Pooling::Avg);
        let (h, s) = run(&enc, &[vec![5, 6]]);
        for j in 0..8 {
            let expect = (h.data()[j] + h.data()[8 + j]) / 2.0;
            assert!((s.data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_prefix_unchanged_by_later_token() {
        let enc = small(AttentionMode::Causal, Pooling::Avg);
        let (a, _) = run(&enc, &[vec![4, 5, 6, 7]]);
        let (b, _) = run(&enc, &[vec![4, 5, 6, 12]]);
        let prefix = 3 * 8;
        assert_eq!(&a.data()[..prefix], &b.data()[..prefix]);
        assert_ne!(&a.data()[prefix..], &b.data()[prefix..]);
    }

    #[test]
    fn bidirectional_prefix_changes() {
        let enc = small(AttentionMode::Bidirectional, Pooling::Avg);
        let (a, _) = run(&enc, &[vec![4, 5, 6, 7]]);
        let (b, _) = run(&enc, &[vec![4, 5, 6, 12]]);
        assert_ne!(&a.data()[..8], &b.data()[..8]);
    }

    #[test]
    fn padded_values_do_not_matter() {
        let enc = small(AttentionMode::Bidirectional, Pooling::Avg);
        let mut batch = TokenBatch::from_sequences(&[vec![4, 5, 6], vec![7]]);
        let mut tape = Tape::new();
        let s1 = enc
            .forward(&mut tape, &batch, &mut Dropout::Off)
            .unwrap()
            .sentence;
        let s1 = tape.value(s1).clone();
        batch.ids[4] = 11;
        batch.ids[5] = 13;
        let mut tape = Tape::new();
        let s2 = enc
            .forward(&mut tape, &batch, &mut Dropout::Off)
            .unwrap()
            .sentence;
        assert_eq!(&s1, tape.value(s2));
    }

    #[test]
    fn input_errors() {
        let enc = small(AttentionMode::Bidirectional, Pooling::Avg);
        let mut tape = Tape::new();
        let oov = TokenBatch::from_sequences(&[vec![4, 99]]);
        assert!(matches!(
            enc.forward(&mut tape, &oov, &mut Dropout::Off),
            Err(crate::Error::Input(_))
        ));
        let mut all_pad = TokenBatch::from_sequences(&[vec![4, 5], vec![6]]);
        all_pad.pad_mask[2] = true;
        all_pad.pad_mask[3] = true;
        assert!(matches!(
            enc.forward(&mut tape, &all_pad, &mut Dropout::Off),
            Err(crate::Error::Input(_))
        ));
        let long = TokenBatch::from_sequences(&[vec![4; 9]]);
        assert!(matches!(
            enc.forward(&mut tape, &long, &mut Dropout::Off),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn config_invariants() {
        let bad = TextEncoderConfig {
            d_model: 10,
            n_heads: 4,
            ..TextEncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TextEncoderConfig {
            max_len: 1,
            ..TextEncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(LoraConfig::default().scaling(), 2.0);
    }

    #[test]
    fn zero_b_lora_matches_base_bitwise() {
        let base = small(AttentionMode::Bidirectional, Pooling::Avg);
        let mut with = base.clone();
        with.attach_lora(
            LoraConfig {
                rank: 2,
                alpha: 4.0,
                ..LoraConfig::default()
            },
            &mut Rng::new(5),
        )
        .unwrap();
        let seqs = vec![vec![4, 5, 6], vec![7, 8]];
        assert_eq!(run(&base, &seqs), run(&with, &seqs));
        assert!(with.base_params().iter().all(|p| !p.trainable));
        assert!(with.lora_params().iter().all(|p| p.trainable));
    }

    #[test]
    fn merge_with_zero_b_is_exact() {
        let base = small(AttentionMode::Bidirectional, Pooling::Avg);
        let mut with = base.clone();
        with.attach_lora(LoraConfig::default(), &mut Rng::new(5))
            .unwrap();
        let merged = with.lora_merge().unwrap();
        for (a, b) in merged.base_params().iter().zip(base.base_params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(!merged.has_lora());
        assert!(base.lora_merge().is_err());
    }

    #[test]
    fn full_rank_identity_scaling_adds_delta() {
        let base = small(AttentionMode::Bidirectional, Pooling::Avg);
        let mut with = base.clone();
        let d = 8;
        with.attach_lora(
            LoraConfig {
                rank: d,
                alpha: d as f64,
                targets: vec![LoraTarget::Query],
            },
            &mut Rng::new(5),
        )
        .unwrap();
        // B = I, A = Δ, so B·A = Δ and the stored delta is Δᵀ.
        let mut rng = Rng::new(9);
        let delta: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        {
            let pair = with.lora_pair_mut(0, LoraTarget::Query).unwrap();
            pair.a.value = Tensor::new(vec![d, d], delta.clone()).unwrap();
            pair.b.value = Tensor::eye(d);
        }
        let merged = with.lora_merge().unwrap();
        let w0 = base.layers[0].wq.w.value.data();
        let w1 = merged.layers[0].wq.w.value.data();
        for i in 0..d {
            for j in 0..d {
                assert_eq!(w1[j * d + i], w0[j * d + i] + delta[i * d + j]);
            }
        }
    }
}
