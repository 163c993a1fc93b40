#![allow(dead_code)]

pub mod gradsuite;

use l2c_core::config::DataConfig;
use l2c_core::datagen::Corpus;
use l2c_core::encoders::{TextEncoder, TextEncoderConfig};
use l2c_core::numerics::Rng;

pub fn small_data(n_train: usize, n_eval: usize, seed: u64) -> (Corpus, Corpus) {
    DataConfig {
        n_train,
        n_eval,
        ..DataConfig::default()
    }
    .build(seed)
    .unwrap()
}

/// The untuned LLM surrogate, initialised the way the CLI does it.
pub fn raw_encoder(seed: u64) -> TextEncoder {
    let mut init = Rng::stream(seed, "init").fork("llm");
    TextEncoder::new("llm", TextEncoderConfig::llm_surrogate(), &mut init).unwrap()
}
