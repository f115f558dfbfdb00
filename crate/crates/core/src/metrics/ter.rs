use rayon::prelude::*;

use super::{check_lengths, MetricError};

/// Longest block considered for a shift.
pub const MAX_SHIFT_LEN: usize = 10;

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// For each reference position, the hypothesis position it is aligned to
/// (match or substitution) on one minimum-cost path.
fn alignment<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<Option<usize>> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = vec![None; m];
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        if d[i][j] == d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]) {
            out[j - 1] = Some(i - 1);
            i -= 1;
            j -= 1;
        } else if d[i][j] == d[i - 1][j] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out
}

/// Moves `words[start..start+len]` so that it begins at index `dest` of
/// the result.
fn shifted<T: Clone>(words: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = Vec::with_capacity(words.len());
    rest.extend_from_slice(&words[..start]);
    rest.extend_from_slice(&words[start + len..]);
    let mut out = Vec::with_capacity(words.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&words[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// The shift with the largest edit-distance reduction, if any reduces it.
///
/// Blocks must occur in the reference; destinations are next to the
/// hypothesis words aligned with the reference neighbours of that
/// occurrence. Ties go to the first candidate in (start, length, dest)
/// order.
fn best_shift<T: PartialEq + Clone>(hyp: &[T], reference: &[T], current: usize) -> Option<(usize, Vec<T>)> {
    let align = alignment(hyp, reference);
    let mut best: Option<(usize, Vec<T>)> = None;
    for start in 0..hyp.len() {
        for len in 1..=MAX_SHIFT_LEN.min(hyp.len() - start) {
            let block = &hyp[start..start + len];
            for rs in 0..reference.len().saturating_sub(len - 1) {
                if &reference[rs..rs + len] != block {
                    continue;
                }
                // already in place
                if (0..len).all(|k| align[rs + k] == Some(start + k)) {
                    continue;
                }
                let mut dests = Vec::new();
                if rs == 0 {
                    dests.push(0);
                } else if let Some(a) = align[rs - 1] {
                    if a < start {
                        dests.push(a + 1);
                    } else if a >= start + len {
                        dests.push(a + 1 - len);
                    }
                }
                if let Some(Some(a)) = align.get(rs + len) {
                    if *a < start {
                        dests.push(*a);
                    } else if *a >= start + len {
                        dests.push(*a - len);
                    }
                }
                for dest in dests {
                    if dest == start {
                        continue;
                    }
                    let cand = shifted(hyp, start, len, dest);
                    let d = edit_distance(&cand, reference);
                    if d < current && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, cand));
                    }
                }
            }
        }
    }
    best
}

/// Edits (insertions, deletions, substitutions and shifts) needed to turn
/// `hyp` into `reference`, whitespace-tokenized.
pub fn ter_edits(hyp: &str, reference: &str) -> usize {
    let mut h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut shifts = 0;
    let mut dist = edit_distance(&h, &r);
    while dist > 0 {
        match best_shift(&h, &r, dist) {
            Some((d, next)) => {
                h = next;
                dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    dist + shifts
}

/// Corpus TER as a fraction: total edits over total reference words. With
/// no reference words at all the score is 1 if any edit is needed, else 0.
pub fn ter<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(hyps: &[H], refs: &[R]) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    let (edits, words) = hyps
        .par_iter()
        .zip(refs)
        .map(|(h, r)| (ter_edits(h.as_ref(), r.as_ref()), r.as_ref().split_whitespace().count()))
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(match (edits, words) {
        (0, _) => 0.0,
        (_, 0) => 1.0,
        (e, w) => e as f64 / w as f64,
    })
}
