//! Supervised, preference, and combined CPO objectives.
//!
//! For a batch of N framed triplets with sequence log-probabilities
//! `lc = log π(chosen | source)` and `lr = log π(rejected | source)`:
//!
//! ```text
//! pref = -(1/N) Σ log σ(β (lc - lr))
//! sft  = -(1/N) Σ lc
//! cpo  = pref + sft
//! ```
//!
//! `log σ` is evaluated as `-softplus(-z)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sequence_logprob, ModelError, ModelParams, ParamVars};
use crate::prefgen::PreferenceTriplet;
use crate::tensor::{log_sigmoid, Gradients, Tape, Tensor, Var};
use crate::tokenizer::{encode, frame_pair, Framed};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be a positive finite number, got {0}")]
    Beta(f64),
    #[error("example {index} has no rejected side; the preference loss needs triplets")]
    MissingRejected { index: usize },
    #[error("unknown normalization `{0}` (expected `sum` or `per_token_mean`)")]
    UnknownNormalization(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a sequence's token log-probabilities are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Sum,
    PerTokenMean,
}

impl FromStr for Normalization {
    type Err = ObjectiveError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "per_token_mean" => Ok(Normalization::PerTokenMean),
            other => Err(ObjectiveError::UnknownNormalization(other.to_string())),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Sum => "sum",
            Normalization::PerTokenMean => "per_token_mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpoConfig {
    pub beta: f64,
    pub normalization: Normalization,
}

impl Default for CpoConfig {
    fn default() -> Self {
        CpoConfig {
            beta: 0.1,
            normalization: Normalization::Sum,
        }
    }
}

impl CpoConfig {
    pub fn new(beta: f64, normalization: Normalization) -> Result<Self, ObjectiveError> {
        let c = CpoConfig { beta, normalization };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(ObjectiveError::Beta(self.beta));
        }
        Ok(())
    }
}

/// Values of the three loss terms. `total` is computed as `pref + sft`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub pref: f64,
    pub sft: f64,
    pub total: f64,
}

/// Handles to the loss terms on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pref: Option<Var>,
    pub sft: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            pref: self.pref.map_or(0.0, |v| tape.scalar_value(v)),
            sft: tape.scalar_value(self.sft),
            total: tape.scalar_value(self.total),
        }
    }
}

/// A tokenized, framed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub chosen: Framed,
    pub rejected: Option<Framed>,
}

impl Example {
    pub fn pair(source: &str, chosen: &str) -> Self {
        let src = encode(source);
        Example {
            chosen: frame_pair(&src, &encode(chosen)),
            rejected: None,
        }
    }

    pub fn triplet(t: &PreferenceTriplet) -> Self {
        let src = encode(&t.source);
        Example {
            chosen: frame_pair(&src, &encode(&t.chosen)),
            rejected: Some(frame_pair(&src, &encode(&t.rejected))),
        }
    }

    /// Longest framed sequence in this example.
    pub fn max_len(&self) -> usize {
        let r = self.rejected.as_ref().map_or(0, |f| f.tokens.len());
        self.chosen.tokens.len().max(r)
    }
}

/// `-log σ(β·margin)`, the per-triplet preference loss.
pub fn pref_term(margin: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * margin)
}

fn normalized_logprob(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    framed: &Framed,
    norm: Normalization,
) -> Result<Var, ObjectiveError> {
    let (lp, count) = sequence_logprob(tape, pv, params.config(), &framed.tokens, framed.target_start)?;
    Ok(match norm {
        Normalization::Sum => lp,
        Normalization::PerTokenMean => tape.scale(lp, 1.0 / count as f64),
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var, ObjectiveError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v).map_err(ModelError::from)?;
    }
    Ok(acc)
}

/// Records the supervised NLL `-(1/denom) Σ lc` on `tape`.
///
/// `denom` is normally `batch.len()`; the trainer passes the size of the whole
/// accumulation window so that micro-batch losses add up to the window mean.
pub fn sft_loss_on(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    batch: &[Example],
    config: &CpoConfig,
    denom: usize,
) -> Result<LossVars, ObjectiveError> {
    if batch.is_empty() || denom == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let lcs = batch
        .iter()
        .map(|ex| normalized_logprob(tape, pv, params, &ex.chosen, config.normalization))
        .collect::<Result<Vec<_>, _>>()?;
    let s = sum_vars(tape, &lcs)?;
    let sft = tape.scale(s, -1.0 / denom as f64);
    Ok(LossVars {
        pref: None,
        sft,
        total: sft,
    })
}

/// Records `pref`, `sft` and `total = pref + sft` on `tape`.
pub fn cpo_loss_on(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    batch: &[Example],
    config: &CpoConfig,
    denom: usize,
) -> Result<LossVars, ObjectiveError> {
    config.validate()?;
    if batch.is_empty() || denom == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut lcs = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for (index, ex) in batch.iter().enumerate() {
        let rejected = ex.rejected.as_ref().ok_or(ObjectiveError::MissingRejected { index })?;
        let lc = normalized_logprob(tape, pv, params, &ex.chosen, config.normalization)?;
        let lr = normalized_logprob(tape, pv, params, rejected, config.normalization)?;
        let margin = tape.sub(lc, lr).map_err(ModelError::from)?;
        let z = tape.scale(margin, config.beta);
        terms.push(tape.log_sigmoid(z));
        lcs.push(lc);
    }
    let scale = -1.0 / denom as f64;
    let pref_sum = sum_vars(tape, &terms)?;
    let pref = tape.scale(pref_sum, scale);
    let sft_sum = sum_vars(tape, &lcs)?;
    let sft = tape.scale(sft_sum, scale);
    let total = tape.add(pref, sft).map_err(ModelError::from)?;
    Ok(LossVars {
        pref: Some(pref),
        sft,
        total,
    })
}

/// `-(1/N) Σ log π(chosen | source)`.
pub fn sft_loss(params: &ModelParams, batch: &[Example], config: &CpoConfig) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let l = sft_loss_on(&mut tape, &pv, params, batch, config, batch.len())?;
    Ok(tape.scalar_value(l.total))
}

/// `-(1/N) Σ log σ(β (lc - lr))`.
pub fn pref_loss(params: &ModelParams, batch: &[Example], config: &CpoConfig) -> Result<f64, ObjectiveError> {
    Ok(cpo_loss(params, batch, config)?.pref)
}

pub fn cpo_loss(params: &ModelParams, batch: &[Example], config: &CpoConfig) -> Result<LossBreakdown, ObjectiveError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let l = cpo_loss_on(&mut tape, &pv, params, batch, config, batch.len())?;
    Ok(l.values(&tape))
}

/// Per-example margins `lc - lr` (normalized per `config`).
pub fn margins(params: &ModelParams, batch: &[Example], config: &CpoConfig) -> Result<Vec<f64>, ObjectiveError> {
    batch
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let rejected = ex.rejected.as_ref().ok_or(ObjectiveError::MissingRejected { index })?;
            let mut tape = Tape::new();
            let pv = params.register(&mut tape, false);
            let lc = normalized_logprob(&mut tape, &pv, params, &ex.chosen, config.normalization)?;
            let lr = normalized_logprob(&mut tape, &pv, params, rejected, config.normalization)?;
            Ok(tape.scalar_value(lc) - tape.scalar_value(lr))
        })
        .collect()
}

/// Which objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Sft,
    Cpo,
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(Objective::Sft),
            "cpo" => Ok(Objective::Cpo),
            other => Err(format!("unknown objective `{other}` (valid: sft, cpo)")),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Sft => "sft",
            Objective::Cpo => "cpo",
        })
    }
}

/// Loss values and parameter gradients (in layout order) for one batch.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[Example],
    objective: Objective,
    config: &CpoConfig,
    denom: usize,
) -> Result<(LossBreakdown, Vec<Tensor>), ObjectiveError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let l = match objective {
        Objective::Sft => sft_loss_on(&mut tape, &pv, params, batch, config, denom)?,
        Objective::Cpo => cpo_loss_on(&mut tape, &pv, params, batch, config, denom)?,
    };
    let values = l.values(&tape);
    let mut grads: Gradients = tape.backward(l.total).map_err(ModelError::from)?;
    let out = pv
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((values, out))
}
