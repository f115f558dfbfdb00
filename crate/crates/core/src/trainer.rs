//! Optimization loop: gradient accumulation, warmup + cosine schedule,
//! Adam, checkpoint cadence and bitwise-reproducible resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{read_tensor_file, write_tensor_file, ModelConfig, ModelError, ModelParams};
use crate::objectives::{loss_and_grads, CpoConfig, Example, Normalization, Objective, ObjectiveError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyData,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("total_steps {total} is smaller than warmup_steps {warmup}")]
    Schedule { total: usize, warmup: usize },
    #[error("step {step}: step outside 0..={total}")]
    StepRange { step: usize, total: usize },
    #[error("non-finite loss at optimizer step {step}")]
    NonFinite { step: usize },
    #[error("example {index}: {message}")]
    BadExample { index: usize, message: String },
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("checkpoint write failed at {path}: {message}")]
    CheckpointWrite { path: PathBuf, message: String },
    #[error("resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub objective: Objective,
    /// Reshuffle examples each epoch (seeded). Off by default.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            grad_accum: 8,
            lr_peak: 1e-3,
            warmup_steps: 200,
            epochs: 1,
            seed: 42,
            checkpoint_every: 31,
            objective: Objective::Cpo,
            shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return bad("lr_peak must be positive");
        }
        Ok(())
    }

    /// Warmup actually used for a run of `total_steps`: at most a tenth of
    /// the run.
    pub fn effective_warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps.min(total_steps / 10)
    }
}

/// `ceil(n / effective_batch)`.
pub fn steps_per_epoch(n: usize, effective_batch: usize) -> usize {
    n.div_ceil(effective_batch)
}

/// Learning rate at optimizer step `step` of `total_steps`: linear warmup
/// from 0 to `lr_peak` over `warmup_steps`, then cosine decay to 0.
pub fn lr_at(step: usize, config: &TrainConfig, total_steps: usize) -> Result<f64, TrainError> {
    schedule_lr(step, config.lr_peak, config.warmup_steps, total_steps)
}

fn schedule_lr(step: usize, peak: f64, warmup: usize, total: usize) -> Result<f64, TrainError> {
    if total < warmup {
        return Err(TrainError::Schedule { total, warmup });
    }
    if step > total {
        return Err(TrainError::StepRange { step, total });
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with (0.9, 0.999), eps 1e-8, no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Adam::new(params.tensors().iter().map(|(_, t)| t.numel()))
    }

    /// One update of `params` in place from matching `grads`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut [f64]>, grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// One optimizer step's logged losses (window means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub pref: Option<f64>,
    pub sft: f64,
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    pub adam: Adam,
    /// Seed of the per-epoch shuffle; the order of epoch `e` is a pure
    /// function of `(seed, e)`.
    pub seed: u64,
    pub history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: usize,
    adam_t: u64,
    seed: u64,
    config: TrainConfig,
    cpo: CpoConfig,
    running_loss: Option<f64>,
    history: Vec<LossRecord>,
}

/// Result of a (possibly partial) training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub checkpoints: Vec<String>,
    pub history: Vec<LossRecord>,
    pub total_steps: usize,
}

pub fn checkpoint_label(step: usize) -> String {
    format!("checkpoint-{step}")
}

pub struct Trainer {
    config: TrainConfig,
    cpo: CpoConfig,
    params: ModelParams,
    state: TrainState,
    out_dir: Option<PathBuf>,
    checkpoints: Vec<String>,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig, cpo: CpoConfig) -> Result<Self, TrainError> {
        config.validate()?;
        cpo.validate()?;
        let adam = Adam::for_params(&params);
        let seed = config.seed;
        Ok(Trainer {
            config,
            cpo,
            params,
            state: TrainState {
                step: 0,
                adam,
                seed,
                history: Vec::new(),
            },
            out_dir: None,
            checkpoints: Vec::new(),
        })
    }

    /// Writes cadence checkpoints, the final model and `loss.csv` under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Restores params and optimizer state from a checkpoint directory.
    /// `config` and `cpo` must equal the ones the checkpoint was written with.
    pub fn resume(checkpoint: &Path, config: TrainConfig, cpo: CpoConfig) -> Result<Self, TrainError> {
        let params = ModelParams::load(checkpoint)?;
        let state_path = checkpoint.join("state.json");
        let text = fs::read_to_string(&state_path)
            .map_err(|e| TrainError::Resume(format!("{}: {e}", state_path.display())))?;
        let sf: StateFile = serde_json::from_str(&text).map_err(|e| TrainError::Resume(e.to_string()))?;
        if sf.config != config || sf.cpo != cpo {
            return Err(TrainError::Resume(
                "training config differs from the one stored in the checkpoint".into(),
            ));
        }
        let (_, m) = read_tensor_file(checkpoint, "adam_m")?;
        let (_, v) = read_tensor_file(checkpoint, "adam_v")?;
        let adam = Adam {
            m: m.into_iter().map(|(_, t)| t.into_data()).collect(),
            v: v.into_iter().map(|(_, t)| t.into_data()).collect(),
            t: sf.adam_t,
        };
        let mut trainer = Trainer::new(params, config, cpo)?;
        trainer.state = TrainState {
            step: sf.step,
            adam,
            seed: sf.seed,
            history: sf.history,
        };
        Ok(trainer)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Runs until the schedule ends or `stop_after` optimizer steps have
    /// completed in total (counting steps before a resume).
    pub fn run(&mut self, data: &[Example], stop_after: Option<usize>) -> Result<(), TrainError> {
        self.check_data(data)?;
        let eb = self.config.effective_batch();
        let per_epoch = steps_per_epoch(data.len(), eb);
        let total = per_epoch * self.config.epochs;
        let warmup = self.config.effective_warmup(total);
        let end = stop_after.map_or(total, |s| s.min(total));

        let mut epoch_order: Option<(usize, Vec<usize>)> = None;
        while self.state.step < end {
            let step = self.state.step;
            let epoch = step / per_epoch;
            let in_epoch = step % per_epoch;
            if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                epoch_order = Some((epoch, self.epoch_order(data.len(), epoch)));
            }
            let order = &epoch_order.as_ref().unwrap().1;
            let window: Vec<usize> = order[in_epoch * eb..((in_epoch + 1) * eb).min(data.len())].to_vec();

            let lr = schedule_lr(step, self.config.lr_peak, warmup, total)?;
            let record = self.optimizer_step(data, &window, lr, step + 1)?;
            self.state.history.push(record);
            self.state.step += 1;

            if self.state.step.is_multiple_of(self.config.checkpoint_every) {
                let label = checkpoint_label(self.state.step);
                if let Some(dir) = self.out_dir.clone() {
                    self.write_checkpoint(&dir.join(&label))?;
                    self.write_loss_log(&dir)?;
                }
                self.checkpoints.push(label);
            }
        }
        if self.state.step == total {
            if let Some(dir) = self.out_dir.clone() {
                self.write_checkpoint(&dir.join("final"))?;
                self.write_loss_log(&dir)?;
            }
        }
        Ok(())
    }

    pub fn finish(self, total_steps: usize) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            checkpoints: self.checkpoints,
            history: self.state.history,
            total_steps,
        }
    }

    fn check_data(&self, data: &[Example]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let max = self.params.config().max_seq_len;
        for (index, ex) in data.iter().enumerate() {
            if self.config.objective == Objective::Cpo && ex.rejected.is_none() {
                return Err(TrainError::BadExample {
                    index,
                    message: "cpo objective needs a rejected side".into(),
                });
            }
            if ex.max_len() > max {
                return Err(TrainError::BadExample {
                    index,
                    message: format!("framed length {} exceeds max_seq_len {max}", ex.max_len()),
                });
            }
        }
        Ok(())
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle {
            let seed = self.state.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
    }

    fn optimizer_step(
        &mut self,
        data: &[Example],
        window: &[usize],
        lr: f64,
        step_no: usize,
    ) -> Result<LossRecord, TrainError> {
        let denom = window.len();
        let mut acc: Vec<Vec<f64>> = self.params.tensors().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let (mut total, mut pref, mut sft) = (0.0, 0.0, 0.0);
        for chunk in window.chunks(self.config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&self.params, &batch, self.config.objective, &self.cpo, denom)?;
            total += loss.total;
            pref += loss.pref;
            sft += loss.sft;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
            }
        }
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step: step_no });
        }
        let grad_refs: Vec<&[f64]> = acc.iter().map(Vec::as_slice).collect();
        self.state
            .adam
            .step(self.params.tensors_mut().map(Tensor::data_mut), &grad_refs, lr);
        if !self.params.is_finite() {
            return Err(TrainError::NonFinite { step: step_no });
        }
        Ok(LossRecord {
            step: step_no,
            lr,
            total,
            pref: (self.config.objective == Objective::Cpo).then_some(pref),
            sft,
        })
    }

    /// Writes params, optimizer moments and `state.json` into `dir`
    /// atomically (temp directory + rename).
    fn write_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        let fail = |message: String| TrainError::CheckpointWrite {
            path: dir.to_path_buf(),
            message,
        };
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| fail(e.to_string()))?;
        }
        self.params.save(&tmp).map_err(|e| fail(e.to_string()))?;
        let names: Vec<String> = self.params.tensors().iter().map(|(n, _)| n.clone()).collect();
        let shapes: Vec<Vec<usize>> = self.params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        for (stem, moments) in [("adam_m", &self.state.adam.m), ("adam_v", &self.state.adam.v)] {
            let tensors: Vec<(String, Tensor)> = names
                .iter()
                .zip(&shapes)
                .zip(moments)
                .map(|((n, s), d)| (n.clone(), Tensor::new(s.clone(), d.clone()).expect("moment shape")))
                .collect();
            write_tensor_file(&tmp, stem, self.params.config(), &tensors).map_err(|e| fail(e.to_string()))?;
        }
        let sf = StateFile {
            step: self.state.step,
            adam_t: self.state.adam.t,
            seed: self.state.seed,
            config: self.config.clone(),
            cpo: self.cpo,
            running_loss: self.state.history.last().map(|r| r.total),
            history: self.state.history.clone(),
        };
        let json = serde_json::to_string_pretty(&sf).map_err(|e| fail(e.to_string()))?;
        fs::write(tmp.join("state.json"), json).map_err(|e| fail(e.to_string()))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| fail(e.to_string()))?;
        }
        fs::rename(&tmp, dir).map_err(|e| fail(e.to_string()))?;
        Ok(())
    }

    fn write_loss_log(&self, dir: &Path) -> Result<(), TrainError> {
        let path = dir.join("loss.csv");
        fs::write(&path, loss_csv(&self.state.history)).map_err(|e| TrainError::CheckpointWrite {
            path,
            message: e.to_string(),
        })
    }
}

/// CSV with columns `step,lr,loss_total,loss_pref,loss_sft`. `loss_pref` is
/// empty for SFT runs.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss_total,loss_pref,loss_sft\n");
    for r in history {
        let pref = r.pref.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.lr, r.total, pref, r.sft);
    }
    s
}

/// Trains from scratch to the end of the schedule.
pub fn train(
    params: ModelParams,
    data: &[Example],
    config: &TrainConfig,
    cpo: &CpoConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(params, config.clone(), *cpo)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir);
    }
    trainer.run(data, None)?;
    let total = steps_per_epoch(data.len(), config.effective_batch()) * config.epochs;
    Ok(trainer.finish(total))
}

/// Everything a `key=value` config file can set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cpo: CpoConfig,
    pub model: ModelConfig,
    /// Whether `seed` was given explicitly (it outranks the environment).
    pub seed_set: bool,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and bad
    /// values are reported with their line number.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut rc = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| TrainError::ConfigParse {
                line,
                message: format!("expected key=value, got `{content}`"),
            })?;
            rc.set(key.trim(), value.trim())
                .map_err(|message| TrainError::ConfigParse { line, message })?;
        }
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::ConfigParse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Sets one field by its config-file name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = num(key, value)?,
            "grad_accum" | "gradient_accumulation" => t.grad_accum = num(key, value)?,
            "lr_peak" | "lr" | "learning_rate" => t.lr_peak = num(key, value)?,
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                self.seed_set = true;
            }
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "objective" => t.objective = value.parse()?,
            "shuffle" => t.shuffle = num(key, value)?,
            "schedule" => {
                if value != "cosine" {
                    return Err(format!("unsupported schedule `{value}` (only cosine)"));
                }
            }
            "beta" => self.cpo.beta = num(key, value)?,
            "normalization" => {
                self.cpo.normalization = value.parse::<Normalization>().map_err(|e| e.to_string())?
            }
            "n_layers" => self.model.n_layers = num(key, value)?,
            "d_model" => self.model.d_model = num(key, value)?,
            "n_heads" => self.model.n_heads = num(key, value)?,
            "d_ff" => self.model.d_ff = num(key, value)?,
            "max_seq_len" => self.model.max_seq_len = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VOCAB_SIZE;

    #[test]
    fn schedule_anchor_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c, 460).unwrap(), 0.0);
        assert_eq!(lr_at(200, &c, 460).unwrap(), 1e-3);
        let mid = lr_at(400, &c, 600).unwrap();
        assert!((mid - 5e-4).abs() < 1e-12);
        assert!(lr_at(600, &c, 600).unwrap().abs() < 1e-18);
        assert!(matches!(lr_at(0, &c, 100), Err(TrainError::Schedule { .. })));
        assert!(lr_at(601, &c, 600).is_err());
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        assert_eq!(steps_per_epoch(992, 32), 31);
        assert_eq!(steps_per_epoch(14_700, 32), 460);
        assert_eq!(steps_per_epoch(1, 32), 1);
    }

    #[test]
    fn warmup_is_clamped_for_short_runs() {
        let c = TrainConfig::default();
        assert_eq!(c.effective_warmup(31), 3);
        assert_eq!(c.effective_warmup(5000), 200);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut w = vec![1.0];
        let mut adam = Adam::new([1]);
        let g = [2.0 * w[0]];
        adam.step([w.as_mut_slice()], &[&g], 0.1);
        assert!(w[0] < 1.0);
    }

    #[test]
    fn adam_first_step_is_scale_free() {
        for g in [1e-3, 1e3] {
            let mut w = vec![0.0];
            let mut adam = Adam::new([1]);
            adam.step([w.as_mut_slice()], &[&[g]], 0.01);
            assert!((w[0].abs() - 0.01).abs() < 1e-6, "{g}: {}", w[0]);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut w = vec![0.5, -0.25];
        let mut adam = Adam::new([2]);
        adam.step([w.as_mut_slice()], &[&[0.0, 0.0]], 0.1);
        assert_eq!(w, vec![0.5, -0.25]);
    }

    #[test]
    fn config_file_parsing() {
        let rc = RunConfig::parse(
            "# smoke\nbatch_size = 2\ngrad_accum=1\nlr = 3e-3\nobjective = sft\nbeta=0.5\nnormalization = per_token_mean\nd_model = 32 # small\n",
        )
        .unwrap();
        assert_eq!(rc.train.batch_size, 2);
        assert_eq!(rc.train.grad_accum, 1);
        assert_eq!(rc.train.lr_peak, 3e-3);
        assert_eq!(rc.train.objective, Objective::Sft);
        assert_eq!(rc.cpo.beta, 0.5);
        assert_eq!(rc.cpo.normalization, Normalization::PerTokenMean);
        assert_eq!(rc.model.d_model, 32);
        assert_eq!(rc.model.vocab_size, VOCAB_SIZE);

        let err = RunConfig::parse("seed = 1\n\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, TrainError::ConfigParse { line: 3, .. }), "{err}");
        let err = RunConfig::parse("epochs = many\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = RunConfig::parse("objective = rlhf\n").unwrap_err();
        assert!(err.to_string().contains("sft, cpo"));
    }

    #[test]
    fn defaults_follow_reference_configuration() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.grad_accum, c.effective_batch()), (4, 8, 32));
        assert_eq!(c.lr_peak, 1e-3);
        assert_eq!((c.warmup_steps, c.epochs, c.seed, c.checkpoint_every), (200, 1, 42, 31));
    }

    #[test]
    fn loss_csv_leaves_pref_blank_for_sft() {
        let h = vec![
            LossRecord { step: 1, lr: 0.0, total: 2.5, pref: None, sft: 2.5 },
            LossRecord { step: 2, lr: 1e-3, total: 3.0, pref: Some(0.5), sft: 2.5 },
        ];
        let csv = loss_csv(&h);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,lr,loss_total,loss_pref,loss_sft");
        assert_eq!(lines[1], "1,0,2.5,,2.5");
        assert_eq!(lines[2], "2,0.001,3,0.5,2.5");
    }
}
