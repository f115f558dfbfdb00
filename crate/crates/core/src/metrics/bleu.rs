use std::collections::HashMap;

use rayon::prelude::*;

use super::{check_lengths, tokenize, MetricError};

const MAX_ORDER: usize = 4;

/// Treatment of n-gram orders with zero matches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Smoothing {
    /// Any zero-match order makes the score 0.
    #[default]
    None,
    /// Zero match counts are replaced by the given floor (e.g. 0.1).
    Floor(f64),
}

/// Summed clipped-match and candidate counts for orders 1..=4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn segment(hyp: &str, reference: &str) -> Self {
        let h = tokenize(hyp);
        let r = tokenize(reference);
        let mut s = BleuStats {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    fn add(mut self, o: Self) -> Self {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self
    }

    /// Modified precision of order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        self.matches[n - 1] as f64 / self.totals[n - 1] as f64
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Score in [0, 100]. Orders without any hypothesis n-gram are left out
    /// of the geometric mean, so a corpus of short segments can still score
    /// 100 against itself.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return if self.ref_len == 0 { 100.0 } else { 0.0 };
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            orders += 1;
            let m = match (self.matches[n], smoothing) {
                (0, Smoothing::None) => return 0.0,
                (0, Smoothing::Floor(f)) => f,
                (m, _) => m as f64,
            };
            log_sum += (m / self.totals[n] as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / orders as f64).exp()
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU-4 without smoothing.
pub fn bleu<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(hyps: &[H], refs: &[R]) -> Result<f64, MetricError> {
    bleu_with(hyps, refs, Smoothing::None)
}

pub fn bleu_with<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    hyps: &[H],
    refs: &[R],
    smoothing: Smoothing,
) -> Result<f64, MetricError> {
    Ok(corpus_stats(hyps, refs)?.score(smoothing))
}

pub(crate) fn corpus_stats<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    hyps: &[H],
    refs: &[R],
) -> Result<BleuStats, MetricError> {
    check_lengths(hyps, refs)?;
    Ok(hyps
        .par_iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::segment(h.as_ref(), r.as_ref()))
        .reduce(BleuStats::default, BleuStats::add))
}
