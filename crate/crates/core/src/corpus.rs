//! Translation-memory ingestion, deterministic splits and nested size subsets.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read TM file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus empty")]
    Empty,
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line} (id {id}): field `{field}` is empty after trimming")]
    EmptyField {
        line: usize,
        id: usize,
        field: &'static str,
    },
    #[error("subset size {requested} out of range 1..={available}")]
    SubsetOutOfRange { requested: usize, available: usize },
    #[error("subset sizes must be strictly increasing, got {0:?}")]
    ScheduleNotIncreasing(Vec<usize>),
    #[error("invalid split fractions dev={dev} test={test}: each must be in [0,1) and their sum < 1")]
    BadFractions { dev: f64, test: f64 },
}

/// One TM entry. `chosen` is the human-approved target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub id: usize,
    pub source: String,
    pub chosen: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub language_pair: String,
    pairs: Vec<SegmentPair>,
}

#[derive(Deserialize)]
struct TmRecord {
    source: String,
    target: String,
}

impl Corpus {
    /// Builds a corpus after checking that it is nonempty, ids are unique and
    /// no segment is blank.
    pub fn new(
        name: impl Into<String>,
        language_pair: impl Into<String>,
        pairs: Vec<SegmentPair>,
    ) -> Result<Self, CorpusError> {
        if pairs.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        for (line, p) in pairs.iter().enumerate() {
            if !seen.insert(p.id) {
                return Err(CorpusError::Malformed {
                    line: line + 1,
                    message: format!("duplicate id {}", p.id),
                });
            }
            check_nonblank(line + 1, p)?;
        }
        Ok(Corpus {
            name: name.into(),
            language_pair: language_pair.into(),
            pairs,
        })
    }

    /// Builds a corpus from `(source, target)` tuples with ids in order.
    pub fn from_texts<S: Into<String>, T: Into<String>>(
        name: impl Into<String>,
        language_pair: impl Into<String>,
        texts: impl IntoIterator<Item = (S, T)>,
    ) -> Result<Self, CorpusError> {
        let pairs = texts
            .into_iter()
            .enumerate()
            .map(|(id, (s, t))| SegmentPair {
                id,
                source: s.into(),
                chosen: t.into(),
            })
            .collect();
        Corpus::new(name, language_pair, pairs)
    }

    pub fn pairs(&self) -> &[SegmentPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    /// Writes the corpus back as TM JSON Lines (`source`, `target`).
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        for p in &self.pairs {
            let rec = serde_json::json!({ "source": p.source, "target": p.chosen });
            writeln!(out, "{rec}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    fn derived(&self, suffix: &str, pairs: Vec<SegmentPair>) -> Corpus {
        Corpus {
            name: format!("{}{suffix}", self.name),
            language_pair: self.language_pair.clone(),
            pairs,
        }
    }
}

fn check_nonblank(line: usize, p: &SegmentPair) -> Result<(), CorpusError> {
    for (field, text) in [("source", &p.source), ("target", &p.chosen)] {
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyField {
                line,
                id: p.id,
                field,
            });
        }
    }
    Ok(())
}

/// Loads a JSON Lines TM file. Ids are 0-based line order; blank lines are
/// not allowed. Unknown fields are ignored.
pub fn load_tm(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_tm(&text, &name)
}

/// Parses TM JSON Lines from memory. The trailing newline of the last record is optional.
pub fn parse_tm(text: &str, name: &str) -> Result<Corpus, CorpusError> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "blank line".into(),
            });
        }
        let rec: TmRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let pair = SegmentPair {
            id: idx,
            source: rec.source,
            chosen: rec.target,
        };
        check_nonblank(line, &pair)?;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(Corpus {
        name: name.to_string(),
        language_pair: String::new(),
        pairs,
    })
}

/// The first `n` pairs in file order. Subsets are nested prefixes.
pub fn subset(corpus: &Corpus, n: usize) -> Result<Corpus, CorpusError> {
    if n == 0 || n > corpus.len() {
        return Err(CorpusError::SubsetOutOfRange {
            requested: n,
            available: corpus.len(),
        });
    }
    Ok(corpus.derived(&format!("[..{n}]"), corpus.pairs[..n].to_vec()))
}

/// Strictly increasing subset sizes, e.g. the 1k/2k/5k/10k/14.7k ladder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetSchedule {
    sizes: Vec<usize>,
}

impl SubsetSchedule {
    pub fn new(sizes: Vec<usize>, corpus_len: usize) -> Result<Self, CorpusError> {
        if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::ScheduleNotIncreasing(sizes));
        }
        let max = *sizes.last().unwrap();
        if max > corpus_len {
            return Err(CorpusError::SubsetOutOfRange {
                requested: max,
                available: corpus_len,
            });
        }
        Ok(SubsetSchedule { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn subsets(&self, corpus: &Corpus) -> Result<Vec<Corpus>, CorpusError> {
        self.sizes.iter().map(|&n| subset(corpus, n)).collect()
    }
}

/// Seeded disjoint train/dev/test partition.
///
/// Dev and test get `round(frac * N)` pairs each, train the remainder. Each
/// part keeps the original file order of its members.
pub fn split(
    corpus: &Corpus,
    dev_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let ok = |f: f64| f.is_finite() && (0.0..1.0).contains(&f);
    if !ok(dev_frac) || !ok(test_frac) || dev_frac + test_frac >= 1.0 {
        return Err(CorpusError::BadFractions {
            dev: dev_frac,
            test: test_frac,
        });
    }
    let n = corpus.len();
    let n_dev = (dev_frac * n as f64).round() as usize;
    let n_test = (test_frac * n as f64).round() as usize;
    if n_dev + n_test >= n {
        return Err(CorpusError::BadFractions {
            dev: dev_frac,
            test: test_frac,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut role = vec![0u8; n];
    for &i in &order[..n_dev] {
        role[i] = 1;
    }
    for &i in &order[n_dev..n_dev + n_test] {
        role[i] = 2;
    }
    let pick = |r: u8| -> Vec<SegmentPair> {
        corpus
            .pairs
            .iter()
            .zip(&role)
            .filter(|(_, &x)| x == r)
            .map(|(p, _)| p.clone())
            .collect()
    };
    Ok((
        corpus.derived("/train", pick(0)),
        corpus.derived("/dev", pick(1)),
        corpus.derived("/test", pick(2)),
    ))
}
