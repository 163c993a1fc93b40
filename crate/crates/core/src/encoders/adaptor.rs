//! Trainable heads placed after a frozen text encoder.

use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use super::text::TextOutput;
use crate::error::{ensure, Result};
use crate::numerics::{Module, Param, Rng, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    /// Residual MLP blocks over the pooled sentence embedding.
    Linear,
    /// Token-level cross-attention onto learned latents, then pooling.
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptorConfig {
    pub kind: AdaptorKind,
    pub depth: usize,
    pub expansion: usize,
    pub n_latents: usize,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            kind: AdaptorKind::Linear,
            depth: 4,
            expansion: 4,
            n_latents: 16,
        }
    }
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.expansion >= 1,
            Config,
            "adaptor expansion must be at least 1"
        );
        if self.kind == AdaptorKind::Transformer {
            ensure!(
                self.n_latents >= 1,
                Config,
                "transformer adaptor needs at least one latent"
            );
        }
        Ok(())
    }

    /// Trainable parameter count of a linear adaptor mapping `d` to `out`.
    pub fn linear_param_count(&self, d: usize, out: usize) -> usize {
        let e = self.expansion;
        self.depth * (2 * d + 2 * e * d * d + e * d + d) + d * out + out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock {
    pub ln: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl MlpBlock {
    fn new(prefix: &str, d: usize, e: usize, rng: &mut Rng) -> Self {
        let h = d * e;
        Self {
            ln: LayerNorm::new(&format!("{prefix}.ln"), d),
            up: Linear::new(
                &format!("{prefix}.up"),
                d,
                h,
                1.0 / (d as f64).sqrt(),
                true,
                rng,
            ),
            down: Linear::new(
                &format!("{prefix}.down"),
                h,
                d,
                1.0 / (h as f64).sqrt(),
                true,
                rng,
            ),
        }
    }

    /// `x + down(gelu(up(ln(x))))`
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.ln.forward(tape, x)?;
        let h = self.up.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.down.forward(tape, h)?;
        tape.add(x, h)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.ln.params();
        v.extend(self.up.params());
        v.extend(self.down.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln.params_mut();
        v.extend(self.up.params_mut());
        v.extend(self.down.params_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnBlock {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp: MlpBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdaptorBody {
    Linear(Vec<MlpBlock>),
    Transformer {
        latents: Param,
        blocks: Vec<CrossAttnBlock>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adaptor {
    pub config: AdaptorConfig,
    pub body: AdaptorBody,
    pub proj: Linear,
}

impl Adaptor {
    pub fn new(
        prefix: &str,
        config: AdaptorConfig,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let std = 1.0 / (d_in as f64).sqrt();
        let body = match config.kind {
            AdaptorKind::Linear => AdaptorBody::Linear(
                (0..config.depth)
                    .map(|i| {
                        MlpBlock::new(&format!("{prefix}.blocks.{i}"), d_in, config.expansion, rng)
                    })
                    .collect(),
            ),
            AdaptorKind::Transformer => {
                let latents = Param::normal(
                    format!("{prefix}.latents"),
                    &[config.n_latents, d_in],
                    1.0,
                    rng,
                );
                let blocks = (0..config.depth)
                    .map(|i| {
                        let p = format!("{prefix}.blocks.{i}");
                        CrossAttnBlock {
                            ln: LayerNorm::new(&format!("{p}.ln"), d_in),
                            q: Linear::new(&format!("{p}.q"), d_in, d_in, std, false, rng),
                            k: Linear::new(&format!("{p}.k"), d_in, d_in, std, false, rng),
                            v: Linear::new(&format!("{p}.v"), d_in, d_in, std, false, rng),
                            o: Linear::new(&format!("{p}.o"), d_in, d_in, std, false, rng),
                            mlp: MlpBlock::new(&format!("{p}.mlp"), d_in, config.expansion, rng),
                        }
                    })
                    .collect();
                AdaptorBody::Transformer { latents, blocks }
            }
        };
        let proj = Linear::new(&format!("{prefix}.proj"), d_in, d_out, std, true, rng);
        Ok(Self { config, body, proj })
    }

    pub fn d_in(&self) -> usize {
        self.proj.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.proj.d_out()
    }

    /// Whether the adaptor only needs the pooled sentence embedding (and can be fed from a cache).
    pub fn is_pooled(&self) -> bool {
        matches!(self.body, AdaptorBody::Linear(_))
    }

    /// Applies a pooled-input adaptor to `[B × d_in]` sentence embeddings.
    pub fn forward_pooled(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let AdaptorBody::Linear(blocks) = &self.body else {
            return Err(crate::Error::Usage(
                "transformer adaptor needs token states".into(),
            ));
        };
        let mut h = x;
        for b in blocks {
            h = b.forward(tape, h)?;
        }
        self.proj.forward(tape, h)
    }

    /// Applies the adaptor to a text forward pass.
    pub fn forward(&self, tape: &mut Tape, text: &TextOutput) -> Result<Var> {
        let (latents, blocks) = match &self.body {
            AdaptorBody::Linear(_) => return self.forward_pooled(tape, text.sentence),
            AdaptorBody::Transformer { latents, blocks } => (latents, blocks),
        };
        let lat = tape.param(latents);
        let inv_sqrt = 1.0 / (self.d_in() as f64).sqrt();
        let mut x = text.hidden;
        for b in blocks {
            let h = b.ln.forward(tape, x)?;
            let q = b.q.forward(tape, h)?;
            let k = b.k.forward(tape, lat)?;
            let v = b.v.forward(tape, lat)?;
            let s = tape.matmul_t(q, false, k, true)?;
            let s = tape.scale(s, inv_sqrt);
            let p = tape.softmax_rows(s)?;
            let a = tape.matmul(p, v)?;
            let a = b.o.forward(tape, a)?;
            x = tape.add(x, a)?;
            x = b.mlp.forward(tape, x)?;
        }
        let pooled = tape.segment_mean(x, &text.segments)?;
        self.proj.forward(tape, pooled)
    }
}

impl Module for Adaptor {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        match &self.body {
            AdaptorBody::Linear(blocks) => blocks.iter().for_each(|b| v.extend(b.params())),
            AdaptorBody::Transformer { latents, blocks } => {
                v.push(latents);
                for b in blocks {
                    v.extend(b.ln.params());
                    for l in [&b.q, &b.k, &b.v, &b.o] {
                        v.extend(l.params());
                    }
                    v.extend(b.mlp.params());
                }
            }
        }
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        match &mut self.body {
            AdaptorBody::Linear(blocks) => blocks.iter_mut().for_each(|b| v.extend(b.params_mut())),
            AdaptorBody::Transformer { latents, blocks } => {
                v.push(latents);
                for b in blocks {
                    v.extend(b.ln.params_mut());
                    v.extend(b.q.params_mut());
                    v.extend(b.k.params_mut());
                    v.extend(b.v.params_mut());
                    v.extend(b.o.params_mut());
                    v.extend(b.mlp.params_mut());
                }
            }
        }
        v.extend(self.proj.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_param_count_matches_formula() {
        for depth in [0, 1, 4] {
            let cfg = AdaptorConfig {
                depth,
                expansion: 4,
                ..AdaptorConfig::default()
            };
            let a = Adaptor::new("a", cfg.clone(), 64, 32, &mut Rng::new(1)).unwrap();
            assert_eq!(a.num_params(), cfg.linear_param_count(64, 32));
        }
    }

    #[test]
    fn depth_zero_is_projection() {
        let cfg = AdaptorConfig {
            depth: 0,
            ..AdaptorConfig::default()
        };
        let a = Adaptor::new("a", cfg, 4, 3, &mut Rng::new(1)).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = a.forward_pooled(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), a.proj.w.value.row(0));
    }

    #[test]
    fn transformer_rejects_pooled_input() {
        let cfg = AdaptorConfig {
            kind: AdaptorKind::Transformer,
            depth: 1,
            ..AdaptorConfig::default()
        };
        let a = Adaptor::new("a", cfg, 8, 4, &mut Rng::new(1)).unwrap();
        assert!(!a.is_pooled());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 8]));
        assert!(a.forward_pooled(&mut tape, x).is_err());
    }
}
