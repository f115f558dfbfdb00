use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use cpoforge::corpus;
use cpoforge::decode::greedy_generate;
use cpoforge::metrics;
use cpoforge::model::{ModelConfig, ModelParams};
use cpoforge::objectives::{self, CpoConfig, Example, Normalization, Objective};
use cpoforge::prefgen::{self, PreferenceTriplet};
use cpoforge::tokenizer::{self, TokenSeq};
use cpoforge::trainer::{self, TrainConfig};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn cpo_config(beta: f64, normalization: &str) -> PyResult<CpoConfig> {
    let norm: Normalization = normalization.parse().map_err(value_err)?;
    CpoConfig::new(beta, norm).map_err(value_err)
}

fn triplet_examples(triplets: Vec<(String, String, String)>) -> Vec<Example> {
    triplets
        .into_iter()
        .enumerate()
        .map(|(i, (source, rejected, chosen))| Example::triplet(&PreferenceTriplet::new(i, source, rejected, chosen)))
        .collect()
}

/// Byte-level encoding; no special tokens are added.
#[pyfunction]
fn encode(text: &str) -> Vec<u32> {
    tokenizer::encode(text).into_ids()
}

#[pyfunction]
fn decode(ids: Vec<u32>) -> String {
    tokenizer::decode(&TokenSeq::new(ids))
}

/// Returns `(tokens, target_start)` for `[BOS] source [SEP] target [EOS]`.
#[pyfunction]
fn frame_pair(source: &str, target: &str) -> (Vec<u32>, usize) {
    let f = tokenizer::frame_pair(&tokenizer::encode(source), &tokenizer::encode(target));
    (f.tokens.into_ids(), f.target_start)
}

#[pyfunction]
fn bleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::bleu(&hypotheses, &references).map_err(value_err)
}

#[pyfunction]
fn chrf_pp(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::chrf_pp(&hypotheses, &references).map_err(value_err)
}

/// Corpus TER as a fraction (multiply by 100 for the usual scale).
#[pyfunction]
fn ter(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::ter(&hypotheses, &references).map_err(value_err)
}

/// Reads a JSONL translation memory into `(id, source, chosen)` tuples.
#[pyfunction]
fn load_tm(path: PathBuf) -> PyResult<Vec<(usize, String, String)>> {
    let c = corpus::load_tm(&path).map_err(io_err)?;
    Ok(c.pairs().iter().map(|p| (p.id, p.source.clone(), p.chosen.clone())).collect())
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, lr_peak=1e-3, warmup_steps=200))]
fn lr_at(step: usize, total_steps: usize, lr_peak: f64, warmup_steps: usize) -> PyResult<f64> {
    let config = TrainConfig {
        lr_peak,
        warmup_steps,
        ..TrainConfig::default()
    };
    trainer::lr_at(step, &config, total_steps).map_err(value_err)
}

#[pyfunction]
fn steps_per_epoch(n: usize, effective_batch: usize) -> usize {
    trainer::steps_per_epoch(n, effective_batch)
}

#[pyfunction]
fn pref_term(margin: f64, beta: f64) -> f64 {
    objectives::pref_term(margin, beta)
}

#[pyclass(name = "Model", module = "cpoforge_py", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (seed=42, n_layers=2, d_model=64, n_heads=4, d_ff=256, max_seq_len=256))]
    fn init(
        seed: u64,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        max_seq_len: usize,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            max_seq_len,
            ..ModelConfig::default()
        };
        let inner = ModelParams::init(config, seed).map_err(value_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ModelParams::load(&path).map_err(io_err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn max_seq_len(&self) -> usize {
        self.inner.config().max_seq_len
    }

    #[pyo3(signature = (source, max_new_tokens=128))]
    fn greedy_generate(&self, py: Python<'_>, source: &str, max_new_tokens: usize) -> PyResult<String> {
        let src = tokenizer::encode(source);
        let out = py
            .detach(|| greedy_generate(&self.inner, &src, max_new_tokens))
            .map_err(value_err)?;
        Ok(tokenizer::decode(&out))
    }

    /// Summed log-probability of `target` given `source`, EOS included.
    fn sequence_logprob(&self, source: &str, target: &str) -> PyResult<f64> {
        let f = tokenizer::frame_pair(&tokenizer::encode(source), &tokenizer::encode(target));
        self.inner.sequence_logprob(&f.tokens, f.target_start).map_err(value_err)
    }

    /// Mean SFT loss over `(source, chosen)` pairs.
    #[pyo3(signature = (pairs, normalization="sum"))]
    fn sft_loss(&self, pairs: Vec<(String, String)>, normalization: &str) -> PyResult<f64> {
        let config = cpo_config(0.1, normalization)?;
        let batch: Vec<Example> = pairs.iter().map(|(s, c)| Example::pair(s, c)).collect();
        objectives::sft_loss(&self.inner, &batch, &config).map_err(value_err)
    }

    /// `(pref, sft, total)` over `(source, rejected, chosen)` triplets.
    #[pyo3(signature = (triplets, beta=0.1, normalization="sum"))]
    fn cpo_loss(
        &self,
        triplets: Vec<(String, String, String)>,
        beta: f64,
        normalization: &str,
    ) -> PyResult<(f64, f64, f64)> {
        let config = cpo_config(beta, normalization)?;
        let l = objectives::cpo_loss(&self.inner, &triplet_examples(triplets), &config).map_err(value_err)?;
        Ok((l.pref, l.sft, l.total))
    }

    /// Trains a copy of this model and returns it with the per-step totals.
    ///
    /// `examples` holds `(source, chosen)` pairs for sft and
    /// `(source, rejected, chosen)` triplets for cpo.
    #[pyo3(signature = (
        examples, objective="cpo", batch_size=4, grad_accum=8, lr_peak=1e-3,
        warmup_steps=200, epochs=1, seed=42, beta=0.1, normalization="sum",
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        py: Python<'_>,
        examples: Vec<Vec<String>>,
        objective: &str,
        batch_size: usize,
        grad_accum: usize,
        lr_peak: f64,
        warmup_steps: usize,
        epochs: usize,
        seed: u64,
        beta: f64,
        normalization: &str,
    ) -> PyResult<(PyModel, Vec<f64>)> {
        let objective: Objective = objective.parse().map_err(PyValueError::new_err)?;
        let cpo = cpo_config(beta, normalization)?;
        let data = examples
            .into_iter()
            .map(|e| match (objective, e.as_slice()) {
                (Objective::Sft, [s, c]) => Ok(Example::pair(s, c)),
                (_, [s, r, c]) => Ok(Example::triplet(&PreferenceTriplet::new(0, s.clone(), r.clone(), c.clone()))),
                _ => Err(PyValueError::new_err(format!(
                    "{objective} expects {} strings per example, got {}",
                    if objective == Objective::Sft { "2 or 3" } else { "3" },
                    e.len()
                ))),
            })
            .collect::<PyResult<Vec<_>>>()?;
        let config = TrainConfig {
            batch_size,
            grad_accum,
            lr_peak,
            warmup_steps,
            epochs,
            seed,
            objective,
            ..TrainConfig::default()
        };
        let params = self.inner.clone();
        let out = py
            .detach(|| trainer::train(params, &data, &config, &cpo, None))
            .map_err(value_err)?;
        let totals = out.history.iter().map(|r| r.total).collect();
        Ok((PyModel { inner: out.params }, totals))
    }
}

/// Builds `(source, rejected, chosen, degenerate)` rows with `model` as the
/// generator and writes them as JSONL to `out` when given.
#[pyfunction]
#[pyo3(signature = (model, tm, out=None, max_new_tokens=128, label="python", seed=42))]
fn synthesize(
    py: Python<'_>,
    model: &PyModel,
    tm: PathBuf,
    out: Option<PathBuf>,
    max_new_tokens: usize,
    label: &str,
    seed: u64,
) -> PyResult<Vec<(String, String, String, bool)>> {
    let c = corpus::load_tm(&tm).map_err(io_err)?;
    let ds = py
        .detach(|| prefgen::synthesize(&model.inner, &c, max_new_tokens, label, seed))
        .map_err(value_err)?;
    if let Some(path) = out {
        ds.save(&path).map_err(io_err)?;
    }
    Ok(ds
        .triplets
        .into_iter()
        .map(|t| (t.source, t.rejected, t.chosen, t.degenerate))
        .collect())
}

#[pymodule]
fn cpoforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BOS", tokenizer::BOS)?;
    m.add("EOS", tokenizer::EOS)?;
    m.add("SEP", tokenizer::SEP)?;
    m.add("PAD", tokenizer::PAD)?;
    m.add("VOCAB_SIZE", tokenizer::VOCAB_SIZE)?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(frame_pair, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(chrf_pp, m)?)?;
    m.add_function(wrap_pyfunction!(ter, m)?)?;
    m.add_function(wrap_pyfunction!(load_tm, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(steps_per_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(pref_term, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
