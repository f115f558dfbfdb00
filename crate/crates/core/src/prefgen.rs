//! Preference dataset synthesis: the model's own greedy output is the
//! rejected candidate, the TM target is the chosen one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::decode::{greedy_generate, DecodeError};
use crate::model::ModelParams;
use crate::tokenizer::{decode, encode};

#[derive(Debug, Error)]
pub enum PrefgenError {
    #[error("generation failed for segment {id}: {source}")]
    Decode {
        id: usize,
        #[source]
        source: DecodeError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed preference record: {message}")]
    Malformed { line: usize, message: String },
    #[error("preference dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub id: usize,
    pub source: String,
    pub rejected: String,
    pub chosen: String,
    /// `rejected == chosen`.
    pub degenerate: bool,
}

impl PreferenceTriplet {
    pub fn new(id: usize, source: String, rejected: String, chosen: String) -> Self {
        let degenerate = rejected == chosen;
        PreferenceTriplet {
            id,
            source,
            rejected,
            chosen,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceDataset {
    pub triplets: Vec<PreferenceTriplet>,
    /// Label of the parameters that produced the rejected side.
    pub generator_checkpoint: String,
    pub seed: u64,
}

/// On-disk record: the triplet plus the dataset provenance fields.
#[derive(Serialize, Deserialize)]
struct Record {
    source: String,
    rejected: String,
    chosen: String,
    id: usize,
    degenerate: bool,
    generator_checkpoint: String,
    seed: u64,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn degenerate_count(&self) -> usize {
        self.triplets.iter().filter(|t| t.degenerate).count()
    }

    /// Copy without degenerate triplets (ablation only).
    pub fn without_degenerate(&self) -> PreferenceDataset {
        PreferenceDataset {
            triplets: self.triplets.iter().filter(|t| !t.degenerate).cloned().collect(),
            generator_checkpoint: self.generator_checkpoint.clone(),
            seed: self.seed,
        }
    }

    /// JSON Lines, one triplet per line.
    pub fn save(&self, path: &Path) -> Result<(), PrefgenError> {
        let io = |source| PrefgenError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        for t in &self.triplets {
            let rec = Record {
                source: t.source.clone(),
                rejected: t.rejected.clone(),
                chosen: t.chosen.clone(),
                id: t.id,
                degenerate: t.degenerate,
                generator_checkpoint: self.generator_checkpoint.clone(),
                seed: self.seed,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, PrefgenError> {
        let text = fs::read_to_string(path).map_err(|source| PrefgenError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PrefgenError> {
        let mut triplets = Vec::new();
        let mut meta: Option<(String, u64)> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let rec: Record = serde_json::from_str(raw).map_err(|e| PrefgenError::Malformed {
                line,
                message: e.to_string(),
            })?;
            if rec.degenerate != (rec.rejected == rec.chosen) {
                return Err(PrefgenError::Malformed {
                    line,
                    message: "`degenerate` disagrees with rejected/chosen equality".into(),
                });
            }
            match &meta {
                None => meta = Some((rec.generator_checkpoint.clone(), rec.seed)),
                Some((ck, seed)) if *ck != rec.generator_checkpoint || *seed != rec.seed => {
                    return Err(PrefgenError::Malformed {
                        line,
                        message: "mixed generator_checkpoint/seed within one dataset".into(),
                    });
                }
                Some(_) => {}
            }
            triplets.push(PreferenceTriplet {
                id: rec.id,
                source: rec.source,
                rejected: rec.rejected,
                chosen: rec.chosen,
                degenerate: rec.degenerate,
            });
        }
        let (generator_checkpoint, seed) = meta.ok_or(PrefgenError::Empty)?;
        Ok(PreferenceDataset {
            triplets,
            generator_checkpoint,
            seed,
        })
    }
}

/// Generates one triplet per corpus pair, in corpus order.
///
/// The rejected side is the greedy output of `params`, trimmed of
/// surrounding whitespace. Bytes that are not valid UTF-8 become U+FFFD
/// (three bytes each), so the text is cut back at a character boundary when
/// needed to keep the framed triplet within `max_seq_len`. Generation runs
/// in parallel; the result does not depend on scheduling.
pub fn synthesize(
    params: &ModelParams,
    corpus: &Corpus,
    max_new_tokens: usize,
    generator_checkpoint: &str,
    seed: u64,
) -> Result<PreferenceDataset, PrefgenError> {
    let triplets = corpus
        .pairs()
        .par_iter()
        .map(|pair| {
            let out = greedy_generate(params, &encode(&pair.source), max_new_tokens)
                .map_err(|source| PrefgenError::Decode { id: pair.id, source })?;
            let rejected = fit_target(decode(&out).trim(), &pair.source, params.config().max_seq_len);
            Ok(PreferenceTriplet::new(
                pair.id,
                pair.source.clone(),
                rejected,
                pair.chosen.clone(),
            ))
        })
        .collect::<Result<Vec<_>, PrefgenError>>()?;
    Ok(PreferenceDataset {
        triplets,
        generator_checkpoint: generator_checkpoint.to_string(),
        seed,
    })
}

/// Longest prefix of `text` (trailing whitespace trimmed) whose framed pair
/// with `source` fits `max_seq_len`.
fn fit_target(text: &str, source: &str, max_seq_len: usize) -> String {
    let budget = max_seq_len.saturating_sub(source.len() + 3);
    if text.len() <= budget {
        return text.to_string();
    }
    let mut end = budget;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::VOCAB_SIZE;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            vocab_size: VOCAB_SIZE,
        }
    }

    fn corpus(n: usize) -> Corpus {
        Corpus::from_texts("t", "en-pt", (0..n).map(|i| (format!("src {i}"), format!("alvo {i}")))).unwrap()
    }

    #[test]
    fn example_triplet_captures_correction() {
        let t = PreferenceTriplet::new(
            0,
            "Press the Save button to store changes.".into(),
            "Pressione o botão Salvar para gravar mudanças.".into(),
            "Pressione o botão Salvar para armazenar as alterações.".into(),
        );
        assert!(!t.degenerate);
        assert!(t.rejected.contains("gravar mudanças"));
        assert!(t.chosen.contains("armazenar as alterações"));
    }

    #[test]
    fn one_triplet_per_pair_in_order() {
        let p = ModelParams::init_with_std(config(), 4, 0.3).unwrap();
        let c = corpus(10);
        let d = synthesize(&p, &c, 6, "init-seed4", 4).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.triplets.iter().map(|t| t.id).collect::<Vec<_>>(), c.ids());
        for (t, pair) in d.triplets.iter().zip(c.pairs()) {
            assert_eq!(t.chosen, pair.chosen);
            assert_eq!(t.source, pair.source);
            assert_eq!(t.rejected, t.rejected.trim());
            assert_eq!(t.degenerate, t.rejected == t.chosen);
        }
        assert_eq!(d.generator_checkpoint, "init-seed4");
        let again = synthesize(&p, &c, 6, "init-seed4", 4).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn rigged_output_equal_to_chosen_is_degenerate() {
        // Bias-only head emitting 'a' forever; chosen "aaaa" matches a
        // 4-token budget exactly.
        let mut p = ModelParams::init(config(), 0).unwrap();
        p.get_mut("tok_emb").unwrap().data_mut().fill(0.0);
        p.get_mut("lm_head.bias").unwrap().data_mut()[b'a' as usize] = 10.0;
        let c = Corpus::from_texts("d", "xx", [("go", "aaaa"), ("go", "aab")]).unwrap();
        let d = synthesize(&p, &c, 4, "rigged", 0).unwrap();
        assert!(d.triplets[0].degenerate);
        assert!(!d.triplets[1].degenerate);
        assert_eq!(d.degenerate_count(), 1);
        assert_eq!(d.without_degenerate().len(), 1);
    }

    #[test]
    fn rejected_side_fits_context() {
        assert_eq!(fit_target("abc", "xy", 8), "abc");
        assert_eq!(fit_target("abcd", "xy", 8), "abc");
        // "é" is two bytes; never split it
        assert_eq!(fit_target("aé", "xy", 7), "a");
        assert_eq!(fit_target("a b", "xy", 7), "a");
        let p = ModelParams::init_with_std(config(), 5, 1.0).unwrap();
        let c = Corpus::from_texts("t", "xx", [("a fairly long source sentence here", "x")]).unwrap();
        let d = synthesize(&p, &c, 128, "init", 5).unwrap();
        let t = &d.triplets[0];
        assert!(t.source.len() + t.rejected.len() + 3 <= 64);
    }

    #[test]
    fn save_load_round_trip_with_korean() {
        let d = PreferenceDataset {
            triplets: vec![
                PreferenceTriplet::new(0, "Save".into(), "저장".into(), "저장하세요".into()),
                PreferenceTriplet::new(1, "a".into(), "b".into(), "b".into()),
                PreferenceTriplet::new(2, "Press the button".into(), "버튼을 누르십시오.".into(), "버튼을 누르세요.".into()),
            ],
            generator_checkpoint: "checkpoint-31".into(),
            seed: 42,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        d.save(f.path()).unwrap();
        let bytes_before = fs::read(f.path()).unwrap();
        let back = PreferenceDataset::load(f.path()).unwrap();
        assert_eq!(back, d);
        let g = tempfile::NamedTempFile::new().unwrap();
        back.save(g.path()).unwrap();
        assert_eq!(fs::read(g.path()).unwrap(), bytes_before);
    }

    #[test]
    fn missing_rejected_reports_line() {
        let text = concat!(
            r#"{"source":"a","rejected":"b","chosen":"c","id":0,"degenerate":false,"generator_checkpoint":"x","seed":1}"#,
            "\n",
            r#"{"source":"a","chosen":"c","id":1,"degenerate":false,"generator_checkpoint":"x","seed":1}"#,
            "\n"
        );
        let err = PreferenceDataset::parse(text).unwrap_err();
        assert!(matches!(err, PrefgenError::Malformed { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("rejected"));
    }
}
