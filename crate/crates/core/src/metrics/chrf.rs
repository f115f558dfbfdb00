use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;

use super::{check_lengths, tokenize, MetricError};

const CHAR_ORDER: usize = 6;
const WORD_ORDER: usize = 2;
const ORDERS: usize = CHAR_ORDER + WORD_ORDER;
const BETA: f64 = 2.0;

/// Per order: (hypothesis n-grams, reference n-grams, clipped matches).
type Stats = [[usize; 3]; ORDERS];

fn counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in s.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

fn order_stats<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> [usize; 3] {
    let (hc, rc) = (counts(hyp, n), counts(reference, n));
    let matched = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    [
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
        matched,
    ]
}

fn segment(hyp: &str, reference: &str) -> Stats {
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hw = tokenize(hyp);
    let rw = tokenize(reference);
    let mut s = [[0; 3]; ORDERS];
    for n in 1..=CHAR_ORDER {
        s[n - 1] = order_stats(&hc, &rc, n);
    }
    for n in 1..=WORD_ORDER {
        s[CHAR_ORDER + n - 1] = order_stats(&hw, &rw, n);
    }
    s
}

fn add(mut a: Stats, b: Stats) -> Stats {
    for (x, y) in a.iter_mut().zip(b) {
        for k in 0..3 {
            x[k] += y[k];
        }
    }
    a
}

/// Precision and recall are averaged over the orders where both sides have
/// n-grams; the F-score with beta 2 is taken of those averages.
fn score(s: &Stats) -> f64 {
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0);
    for &[h, rf, m] in s {
        if h > 0 && rf > 0 {
            p += m as f64 / h as f64;
            r += m as f64 / rf as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        let hyp_empty = s.iter().all(|o| o[0] == 0);
        let ref_empty = s.iter().all(|o| o[1] == 0);
        return if hyp_empty && ref_empty { 100.0 } else { 0.0 };
    }
    p /= orders as f64;
    r /= orders as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = BETA * BETA;
    100.0 * (1.0 + b2) * p * r / (b2 * p + r)
}

/// Corpus chrF++: character 1- to 6-grams (whitespace removed) and word
/// 1- and 2-grams, beta 2.
pub fn chrf_pp<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(hyps: &[H], refs: &[R]) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    let stats = hyps
        .par_iter()
        .zip(refs)
        .map(|(h, r)| segment(h.as_ref(), r.as_ref()))
        .reduce(|| [[0; 3]; ORDERS], add);
    Ok(score(&stats))
}
