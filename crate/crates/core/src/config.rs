//! The run configuration document: every section optional, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{gen_corpus, split_corpus, Corpus, GeneratorSpec};
use crate::encoders::TextEncoderConfig;
use crate::error::{ensure, Error, Result};
use crate::retrieval::DEFAULT_KS;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "L2C_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GeneratorSpec,
    pub n_train: usize,
    pub n_eval: usize,
    pub latent_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            n_train: 4096,
            n_eval: 256,
            latent_dim: 16,
        }
    }
}

impl DataConfig {
    /// Generates one corpus and splits it image-wise into `(train, eval)`.
    pub fn build(&self, seed: u64) -> Result<(Corpus, Corpus)> {
        ensure!(
            self.n_train >= 1 && self.n_eval >= 1,
            Config,
            "data.n_train and data.n_eval must be positive"
        );
        let total = self.n_train + self.n_eval;
        let corpus = gen_corpus(&self.generator, seed, total, self.latent_dim)?;
        let (train, eval) = split_corpus(&corpus, self.n_train as f64 / total as f64, seed)?;
        ensure!(
            train.len() == self.n_train,
            Internal,
            "split produced {} training images",
            train.len()
        );
        Ok((train, eval))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// The LLM surrogate before any Stage-1 tuning.
    pub llm: TextEncoderConfig,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            llm: TextEncoderConfig::llm_surrogate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: Option<String>,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.encoder.llm.validate()?;
        ensure!(
            self.encoder.llm.vocab_size >= self.data.generator.vocab_size,
            Config,
            "encoder vocabulary {} is smaller than the corpus vocabulary {}",
            self.encoder.llm.vocab_size,
            self.data.generator.vocab_size
        );
        ensure!(
            self.stage2.vision.input_dim == self.data.latent_dim,
            Config,
            "stage2.vision.input_dim {} differs from data.latent_dim {}",
            self.stage2.vision.input_dim,
            self.data.latent_dim
        );
        ensure!(
            !self.eval.ks.is_empty() && self.eval.ks.iter().all(|&k| k >= 1),
            Config,
            "eval.ks must be positive"
        );
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// Seed precedence: explicit flag, then `L2C_SEED`, then the document, then 42.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?,
            ),
            Err(_) => None,
        };
        let seed = flag.or(env).or(self.seed).unwrap_or(DEFAULT_SEED);
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
