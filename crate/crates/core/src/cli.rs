//! `cpoforge` command line: synth-pairs → train → evaluate → compare, with
//! explicit files between stages.
//!
//! Exit codes: 0 success, 1 user or input error, 2 internal invariant
//! violation.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::corpus::{load_tm, subset, CorpusError};
use crate::decode::{DecodeError, DEFAULT_MAX_NEW_TOKENS};
use crate::model::{ModelError, ModelParams};
use crate::objectives::{Example, Normalization, Objective, ObjectiveError};
use crate::prefgen::{synthesize, PreferenceDataset, PrefgenError};
use crate::report::{attach_external_scores, compare, evaluate_checkpoints, EvalReport, ReportError};
use crate::trainer::{steps_per_epoch, RunConfig, TrainError, Trainer};

/// Environment variable consulted for the seed when neither `--seed` nor a
/// config file sets one.
pub const SEED_ENV: &str = "CPOFORGE_SEED";
const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "cpoforge", version, about = "Preference-optimized fine-tuning of a tiny byte-level translator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build (source, rejected, chosen) triplets from a TM using the model's own greedy output.
    SynthPairs(SynthArgs),
    /// Fine-tune with the SFT or CPO objective.
    Train(TrainArgs),
    /// Greedy-decode a test TM with one or more checkpoints and score BLEU / chrF++ / TER.
    Evaluate(EvalArgs),
    /// Join an SFT and a CPO report on shared sizes.
    Compare(CompareArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Translation memory, JSON Lines with `source` and `target`.
    #[arg(long)]
    pub tm: PathBuf,
    /// Checkpoint directory, or `init` for freshly seeded parameters.
    #[arg(long)]
    pub checkpoint: String,
    /// Output preference dataset (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
    /// Use only the first N TM pairs.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Leave out triplets whose rejected side equals the chosen side.
    #[arg(long)]
    pub drop_degenerate: bool,
    /// Model shape for `init` (key=value file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for `init` parameters [default: $CPOFORGE_SEED, else 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// sft or cpo.
    #[arg(long)]
    pub objective: String,
    /// Preference triplets (cpo, sft) or TM pairs (sft).
    #[arg(long)]
    pub data: PathBuf,
    /// key=value file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Starting checkpoint; fresh seeded parameters when absent.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue from a `checkpoint-<step>` directory of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// [default: $CPOFORGE_SEED, else 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Micro-batch size [default: 4].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Gradient accumulation steps [default: 8].
    #[arg(long)]
    pub grad_accum: Option<usize>,
    /// Peak learning rate of the cosine schedule [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup steps, capped at a tenth of the run [default: 200].
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Optimizer steps between checkpoints [default: 31].
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Preference-term scale [default: 0.1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// sum or per_token_mean [default: sum].
    #[arg(long)]
    pub normalization: Option<String>,
    /// Reshuffle examples every epoch.
    #[arg(long)]
    pub shuffle: bool,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Checkpoint directory; repeat for several.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Size label per checkpoint, in the same order [default: directory name].
    #[arg(long)]
    pub size: Vec<String>,
    /// Test TM (JSON Lines).
    #[arg(long)]
    pub test: PathBuf,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// System label in the report.
    #[arg(long, default_value = "model")]
    pub system: String,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
    /// JSON Lines of {system, size, score} to attach as an external column.
    #[arg(long)]
    pub external: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub sft: PathBuf,
    #[arg(long)]
    pub cpo: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plot-shaped CSV [default: plotdata.csv next to --out].
    #[arg(long)]
    pub plot_out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn user(message: impl fmt::Display) -> Self {
        CliError {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn decode_code(e: &DecodeError) -> i32 {
    match e {
        DecodeError::Model(m) => model_err_code(m),
        DecodeError::PromptTooLong { .. } => 1,
    }
}

/// Shape and framing failures inside the model mean a bug, not bad input.
fn model_err_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Tensor(_) | ModelError::TargetStart { .. } | ModelError::EmptySequence => 2,
        _ => 1,
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::user(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError {
            code: model_err_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<PrefgenError> for CliError {
    fn from(e: PrefgenError) -> Self {
        let code = match &e {
            PrefgenError::Decode { source, .. } => decode_code(source),
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Model(m) | TrainError::Objective(ObjectiveError::Model(m)) => model_err_code(m),
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        let code = match &e {
            ReportError::Decode { source, .. } => decode_code(source),
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// `--seed`, then a seed set in the config file, then `$CPOFORGE_SEED`,
/// then 42.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::user(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(DEFAULT_SEED),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::user(format!("cannot create {}: {e}", parent.display())))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn synth_pairs(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut corpus = load_tm(&a.tm)?;
    if let Some(n) = a.subset {
        corpus = subset(&corpus, n)?;
    }
    let (params, label, seed) = if a.checkpoint == "init" {
        let rc = load_run_config(a.config.as_deref())?;
        let seed = resolve_seed(a.seed, rc.seed_set.then_some(rc.train.seed), env_seed().as_deref())?;
        (ModelParams::init(rc.model, seed)?, format!("init-seed{seed}"), seed)
    } else {
        let seed = resolve_seed(a.seed, None, env_seed().as_deref())?;
        (ModelParams::load(Path::new(&a.checkpoint))?, a.checkpoint.clone(), seed)
    };
    let mut data = synthesize(&params, &corpus, a.max_new_tokens, &label, seed)?;
    let degenerate = data.degenerate_count();
    if a.drop_degenerate {
        data = data.without_degenerate();
    }
    ensure_parent(&a.out)?;
    data.save(&a.out)?;
    writeln!(
        out,
        "wrote {} triplets ({} degenerate{}) to {}",
        data.len(),
        degenerate,
        if a.drop_degenerate { ", dropped" } else { "" },
        a.out.display()
    )
    .ok();
    Ok(())
}

fn load_training_data(path: &Path, objective: Objective) -> Result<Vec<Example>, CliError> {
    match PreferenceDataset::load(path) {
        Ok(d) => Ok(match objective {
            Objective::Cpo => d.triplets.iter().map(Example::triplet).collect(),
            Objective::Sft => d.triplets.iter().map(|t| Example::pair(&t.source, &t.chosen)).collect(),
        }),
        Err(e @ PrefgenError::Io { .. }) => Err(e.into()),
        Err(e) if objective == Objective::Cpo => Err(CliError::user(format!("{}: {e}", path.display()))),
        Err(_) => {
            let corpus = load_tm(path)?;
            Ok(corpus.pairs().iter().map(|p| Example::pair(&p.source, &p.chosen)).collect())
        }
    }
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let objective: Objective = a.objective.parse().map_err(CliError::user)?;
    let mut rc = load_run_config(a.config.as_deref())?;
    let t = &mut rc.train;
    t.objective = objective;
    t.seed = resolve_seed(a.seed, rc.seed_set.then_some(t.seed), env_seed().as_deref())?;
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.grad_accum {
        t.grad_accum = v;
    }
    if let Some(v) = a.lr {
        t.lr_peak = v;
    }
    if let Some(v) = a.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    t.shuffle |= a.shuffle;
    if let Some(v) = a.beta {
        rc.cpo.beta = v;
    }
    if let Some(v) = &a.normalization {
        rc.cpo.normalization = v.parse::<Normalization>().map_err(CliError::user)?;
    }

    let data = load_training_data(&a.data, objective)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(dir, rc.train.clone(), rc.cpo)?,
        None => {
            let params = match &a.init {
                Some(dir) => ModelParams::load(dir)?,
                None => ModelParams::init(rc.model, rc.train.seed)?,
            };
            Trainer::new(params, rc.train.clone(), rc.cpo)?
        }
    }
    .with_output(&a.out_dir);
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::user(format!("cannot create {}: {e}", a.out_dir.display())))?;
    trainer.run(&data, a.stop_after)?;
    let total = steps_per_epoch(data.len(), rc.train.effective_batch()) * rc.train.epochs;
    let outcome = trainer.finish(total);
    let last = outcome.history.last();
    writeln!(
        out,
        "{} steps of {}; final loss {}; checkpoints: {}",
        last.map_or(0, |r| r.step),
        total,
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.total)),
        if outcome.checkpoints.is_empty() {
            "none".to_string()
        } else {
            outcome.checkpoints.join(", ")
        }
    )
    .ok();
    Ok(())
}

fn evaluate_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !a.size.is_empty() && a.size.len() != a.checkpoint.len() {
        return Err(CliError::user(format!(
            "{} --size labels for {} --checkpoint values",
            a.size.len(),
            a.checkpoint.len()
        )));
    }
    let test = load_tm(&a.test)?;
    let mut checkpoints = Vec::with_capacity(a.checkpoint.len());
    for (i, dir) in a.checkpoint.iter().enumerate() {
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let size = a.size.get(i).cloned().unwrap_or_else(|| label.clone());
        checkpoints.push((size, label, ModelParams::load(dir)?));
    }
    let mut report = evaluate_checkpoints(&checkpoints, &test, a.max_new_tokens, &a.system)?;
    if let Some(path) = &a.external {
        report = attach_external_scores(&report, path)?;
    }
    write_file(&a.out, &report.to_csv())?;
    write!(out, "{}", report.pretty()).ok();
    Ok(())
}

fn compare_cmd(a: &CompareArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let sft = EvalReport::load_csv(&a.sft)?;
    let cpo = EvalReport::load_csv(&a.cpo)?;
    let c = compare(&sft, &cpo)?;
    let plot = a.plot_out.clone().unwrap_or_else(|| {
        a.out
            .parent()
            .map_or_else(|| PathBuf::from("plotdata.csv"), |p| p.join("plotdata.csv"))
    });
    write_file(&a.out, &c.table)?;
    write_file(&plot, &c.plot)?;
    write!(out, "{}", c.table).ok();
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::SynthPairs(a) => synth_pairs(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Compare(a) => compare_cmd(a, out),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Panics are reported as internal errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = std::panic::catch_unwind(|| {
        let mut stdout = std::io::stdout();
        execute(&cli, &mut stdout)
    });
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.code
        }
        Err(_) => {
            eprintln!("error: internal invariant violated");
            2
        }
    }
}
