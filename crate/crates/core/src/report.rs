//! Evaluation harness and comparison tables.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::decode::{greedy_generate, DecodeError};
use crate::metrics::{bleu, chrf_pp, ter, MetricError};
use crate::model::ModelParams;
use crate::tokenizer::{decode, encode};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("decoding segment {id} failed: {source}")]
    Decode {
        id: usize,
        #[source]
        source: DecodeError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no overlapping sizes between the two reports")]
    NoOverlap,
    #[error("external scores for unknown (system, size) keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One evaluated (system, size) combination. `ter` is a fraction of
/// reference words; tables show it scaled by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReportRow {
    pub system: String,
    pub size: String,
    pub bleu: f64,
    pub chrfpp: f64,
    pub ter: f64,
    pub external_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricReportRow>,
    pub language_pair: String,
    pub test_size: usize,
    pub checkpoints: Vec<String>,
}

/// Greedy-decodes every test source and scores the outputs against the
/// chosen references.
pub fn evaluate_checkpoint(
    params: &ModelParams,
    test: &Corpus,
    max_new_tokens: usize,
    system: &str,
    size: &str,
) -> Result<MetricReportRow, ReportError> {
    let hyps = translate(params, test, max_new_tokens)?;
    let refs: Vec<&str> = test.pairs().iter().map(|p| p.chosen.as_str()).collect();
    Ok(MetricReportRow {
        system: system.to_string(),
        size: size.to_string(),
        bleu: bleu(&hyps, &refs)?,
        chrfpp: chrf_pp(&hyps, &refs)?,
        ter: ter(&hyps, &refs)?,
        external_score: None,
    })
}

/// Trimmed greedy outputs for every source, in corpus order.
pub fn translate(params: &ModelParams, test: &Corpus, max_new_tokens: usize) -> Result<Vec<String>, ReportError> {
    test.pairs()
        .par_iter()
        .map(|p| {
            greedy_generate(params, &encode(&p.source), max_new_tokens)
                .map(|out| decode(&out).trim().to_string())
                .map_err(|source| ReportError::Decode { id: p.id, source })
        })
        .collect()
}

/// One row per `(size, label, params)` checkpoint; evaluations run in
/// parallel, rows keep the input order.
pub fn evaluate_checkpoints(
    checkpoints: &[(String, String, ModelParams)],
    test: &Corpus,
    max_new_tokens: usize,
    system: &str,
) -> Result<EvalReport, ReportError> {
    let rows = checkpoints
        .par_iter()
        .map(|(size, _, params)| evaluate_checkpoint(params, test, max_new_tokens, system, size))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        rows,
        language_pair: test.language_pair.clone(),
        test_size: test.len(),
        checkpoints: checkpoints.iter().map(|(_, label, _)| label.clone()).collect(),
    })
}

/// Two decimals; absent values are empty cells.
fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

const REPORT_HEADER: &str = "system,size,bleu,chrfpp,ter,external";

impl EvalReport {
    /// `system,size,bleu,chrfpp,ter,external`, scores with 2 decimals, TER
    /// scaled by 100.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.2},{:.2},{:.2},{}",
                csv_field(&r.system),
                csv_field(&r.size),
                r.bleu,
                r.chrfpp,
                r.ter * 100.0,
                cell(r.external_score)
            );
        }
        s
    }

    /// Inverse of [`EvalReport::to_csv`] for the row values; metadata is not
    /// part of the table.
    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            _ => {
                return Err(ReportError::Parse {
                    line: 1,
                    message: format!("expected header `{REPORT_HEADER}`"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, l) in lines {
            let line = i + 1;
            let f = split_csv_line(l.trim_end_matches('\r'));
            if f.len() != 6 {
                return Err(ReportError::Parse {
                    line,
                    message: format!("expected 6 fields, got {}", f.len()),
                });
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| ReportError::Parse {
                    line,
                    message: format!("not a number: `{s}`"),
                })
            };
            rows.push(MetricReportRow {
                system: f[0].clone(),
                size: f[1].clone(),
                bleu: num(&f[2])?,
                chrfpp: num(&f[3])?,
                ter: num(&f[4])? / 100.0,
                external_score: if f[5].is_empty() { None } else { Some(num(&f[5])?) },
            });
        }
        Ok(EvalReport {
            rows,
            ..Default::default()
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv(&text)
    }

    /// Fixed-width table for terminals.
    pub fn pretty(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            "system", "size", "BLEU", "chrF++", "TER", "external"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>9}",
                r.system,
                r.size,
                r.bleu,
                r.chrfpp,
                r.ter * 100.0,
                cell(r.external_score)
            );
        }
        s
    }
}

/// Side-by-side output of [`compare`].
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// `size,system,bleu,chrfpp,ter[,external]`, SFT row then CPO row per size.
    pub table: String,
    /// One line per size with a column per (system, metric), for line plots.
    pub plot: String,
}

/// Joins two reports on their shared sizes, in the SFT report's order.
pub fn compare(sft: &EvalReport, cpo: &EvalReport) -> Result<Comparison, ReportError> {
    let cpo_by_size: HashMap<&str, &MetricReportRow> = cpo.rows.iter().map(|r| (r.size.as_str(), r)).collect();
    let mut seen = BTreeSet::new();
    let pairs: Vec<(&MetricReportRow, &MetricReportRow)> = sft
        .rows
        .iter()
        .filter(|r| seen.insert(r.size.as_str()))
        .filter_map(|s| cpo_by_size.get(s.size.as_str()).map(|c| (s, *c)))
        .collect();
    if pairs.is_empty() {
        return Err(ReportError::NoOverlap);
    }
    let external = pairs
        .iter()
        .any(|(s, c)| s.external_score.is_some() || c.external_score.is_some());

    let mut table = String::from("size,system,bleu,chrfpp,ter");
    let mut plot = String::from("size,sft_bleu,cpo_bleu,sft_chrfpp,cpo_chrfpp,sft_ter,cpo_ter");
    if external {
        table.push_str(",external");
        plot.push_str(",sft_external,cpo_external");
    }
    table.push('\n');
    plot.push('\n');
    for (s, c) in &pairs {
        for r in [s, c] {
            let _ = write!(
                table,
                "{},{},{:.2},{:.2},{:.2}",
                csv_field(&r.size),
                csv_field(&r.system),
                r.bleu,
                r.chrfpp,
                r.ter * 100.0
            );
            if external {
                let _ = write!(table, ",{}", cell(r.external_score));
            }
            table.push('\n');
        }
        let _ = write!(
            plot,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            csv_field(&s.size),
            s.bleu,
            c.bleu,
            s.chrfpp,
            c.chrfpp,
            s.ter * 100.0,
            c.ter * 100.0
        );
        if external {
            let _ = write!(plot, ",{},{}", cell(s.external_score), cell(c.external_score));
        }
        plot.push('\n');
    }
    Ok(Comparison { table, plot })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalScore {
    system: String,
    size: String,
    score: f64,
}

/// Applies `(system, size) → score` records from JSON Lines text. Every key
/// must match a row.
pub fn attach_external_scores_from_str(report: &EvalReport, text: &str) -> Result<EvalReport, ReportError> {
    let mut out = report.clone();
    let mut unknown = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ExternalScore = serde_json::from_str(raw).map_err(|e| ReportError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match out
            .rows
            .iter_mut()
            .find(|r| r.system == rec.system && r.size == rec.size)
        {
            Some(row) => row.external_score = Some(rec.score),
            None => unknown.push(format!("({}, {})", rec.system, rec.size)),
        }
    }
    if !unknown.is_empty() {
        return Err(ReportError::UnknownKeys(unknown));
    }
    Ok(out)
}

pub fn attach_external_scores(report: &EvalReport, path: &Path) -> Result<EvalReport, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    attach_external_scores_from_str(report, &text)
}
