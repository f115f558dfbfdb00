//! Greedy autoregressive generation.

use thiserror::Error;

use crate::model::{KvCache, ModelError, ModelParams};
use crate::tokenizer::{frame_prompt, TokenSeq, EOS};

/// Default generation budget.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 128;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("prompt of {prompt_len} tokens leaves no room to generate within max_seq_len {max_seq_len}")]
    PromptTooLong { prompt_len: usize, max_seq_len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Index of the largest candidate, lowest index on ties.
///
/// Only content bytes and EOS are candidates; the other framing tokens can
/// never be a valid continuation of a target.
pub fn argmax_candidate(log_probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for id in (1..256).chain(std::iter::once(EOS as usize)) {
        if log_probs[id] > log_probs[best] {
            best = id;
        }
    }
    best as u32
}

/// Greedy continuation of `[BOS] source [SEP]`.
///
/// Stops at EOS, after `max_new_tokens`, or when one more token plus the
/// closing EOS would no longer fit in `max_seq_len`. Returns the generated
/// target tokens only, without EOS.
pub fn greedy_generate(
    params: &ModelParams,
    source: &TokenSeq,
    max_new_tokens: usize,
) -> Result<TokenSeq, DecodeError> {
    let max_seq_len = params.config().max_seq_len;
    let mut seq = frame_prompt(source).into_ids();
    let prompt_len = seq.len();
    if prompt_len + 1 > max_seq_len {
        return Err(DecodeError::PromptTooLong {
            prompt_len,
            max_seq_len,
        });
    }
    let budget = max_new_tokens.min(max_seq_len - prompt_len - 1);
    if budget == 0 {
        return Ok(TokenSeq::new(Vec::new()));
    }
    let mut cache = KvCache::new(params);
    let mut lp = Vec::new();
    for &t in &seq {
        lp = cache.push(t)?;
    }
    for step in 0..budget {
        let next = argmax_candidate(&lp);
        if next == EOS {
            break;
        }
        seq.push(next);
        if step + 1 < budget {
            lp = cache.push(next)?;
        }
    }
    Ok(TokenSeq::new(seq.split_off(prompt_len)))
}
