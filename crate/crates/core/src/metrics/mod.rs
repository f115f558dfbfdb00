//! Corpus-level BLEU, chrF++ and TER.
//!
//! All three accumulate integer statistics per segment (in parallel) and
//! combine them once at corpus level, so results do not depend on
//! scheduling.

mod bleu;
mod chrf;
mod ter;

pub use bleu::{bleu, bleu_with, BleuStats, Smoothing};
pub use chrf::chrf_pp;
pub use ter::{edit_distance, ter, ter_edits, MAX_SHIFT_LEN};

use thiserror::Error;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

pub(crate) fn check_lengths<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

pub fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Word tokens: every Unicode punctuation character becomes its own token,
/// then the text is split on whitespace.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if is_punctuation(c) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}
