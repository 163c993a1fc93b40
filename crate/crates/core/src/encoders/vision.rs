//! Residual MLP standing in for the image tower; it consumes latent image vectors.

use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::error::{ensure, Result};
use crate::numerics::{Module, Param, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionEncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub output_dim: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 64,
            n_blocks: 2,
            output_dim: 32,
        }
    }
}

impl VisionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_dim > 0 && self.hidden_dim > 0 && self.output_dim > 0,
            Config,
            "vision encoder dimensions must be positive"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub output: Linear,
}

impl VisionEncoder {
    pub fn new(prefix: &str, config: VisionEncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let input = Linear::new(
            &format!("{prefix}.in"),
            config.input_dim,
            h,
            1.0 / (config.input_dim as f64).sqrt(),
            true,
            rng,
        );
        let blocks = (0..config.n_blocks)
            .map(|i| {
                Linear::new(
                    &format!("{prefix}.blocks.{i}"),
                    h,
                    h,
                    1.0 / (h as f64).sqrt(),
                    true,
                    rng,
                )
            })
            .collect();
        let output = Linear::new(
            &format!("{prefix}.out"),
            h,
            config.output_dim,
            1.0 / (h as f64).sqrt(),
            true,
            rng,
        );
        Ok(Self {
            config,
            input,
            blocks,
            output,
        })
    }

    /// `[B × input_dim]` latents to `[B × output_dim]` embeddings.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        ensure!(
            tape.value(x).cols() == self.config.input_dim,
            Input,
            "vision input has {} features, expected {}",
            tape.value(x).cols(),
            self.config.input_dim
        );
        let mut h = self.input.forward(tape, x)?;
        for b in &self.blocks {
            let u = b.forward(tape, h)?;
            let u = tape.gelu(u);
            h = tape.add(h, u)?;
        }
        self.output.forward(tape, h)
    }

    pub fn embed(&self, latents: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(latents.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for VisionEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.input.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.output.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.output.params_mut());
        v
    }
}
