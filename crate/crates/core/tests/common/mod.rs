#![allow(dead_code)]
pub mod domain;

use std::path::PathBuf;

use cpoforge::corpus::{load_tm, Corpus};
use cpoforge::model::ModelConfig;
use cpoforge::tokenizer::VOCAB_SIZE;

pub fn toy_tm_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy_tm.jsonl")
}

pub fn toy_corpus() -> Corpus {
    load_tm(&toy_tm_path()).expect("bundled toy corpus")
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 96,
        vocab_size: VOCAB_SIZE,
    }
}
