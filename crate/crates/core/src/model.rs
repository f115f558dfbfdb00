//! Tiny decoder-only causal transformer over the byte vocabulary.
//!
//! Pre-norm residual blocks, learned absolute positions, GELU MLP, and an
//! output projection tied to the token embedding plus a free output bias.
//! The QKV projection has no bias: a key bias only shifts every score in a
//! row and has an identically zero gradient.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::{TokenSeq, PAD, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("target_start {target_start} out of range for sequence of length {len}")]
    TargetStart { target_start: usize, len: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("n_layers, d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.w_out", vec![d, d]),
                ("attn.b_out", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("mlp.w_in", vec![d, f]),
                ("mlp.b_in", vec![f]),
                ("mlp.w_out", vec![f, d]),
                ("mlp.b_out", vec![d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gamma".into(), vec![d]));
        out.push(("ln_f.beta".into(), vec![d]));
        out.push(("lm_head.bias".into(), vec![v]));
        out
    }
}

const PER_LAYER: usize = 11;

/// Positions of parameters within the storage order.
mod idx {
    pub const TOK: usize = 0;
    pub const POS: usize = 1;
    pub const FIRST_LAYER: usize = 2;
}

/// All learnable parameters, stored as named tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Gaussian init (std 0.02) for matrices and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("gamma") {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 2 {
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    /// Builds params from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter on `tape`, as differentiable leaves when
    /// `with_grad`, else as constants.
    pub fn register(&self, tape: &mut Tape, with_grad: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(_, t)| {
                if with_grad {
                    let mut leaf = t.clone();
                    leaf.requires_grad = true;
                    leaf.grad = None;
                    tape.leaf(&leaf)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Per-position log-probabilities `[len, vocab]` for `tokens`.
    pub fn log_probs(&self, tokens: &TokenSeq) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let out = forward(&mut tape, &pv, &self.config, tokens.ids())?;
        Ok(tape.to_tensor(out))
    }

    /// Log-probabilities of the next token after `tokens` (last row only).
    pub fn next_token_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let out = forward_impl(&mut tape, &pv, &self.config, tokens, true)?;
        Ok(tape.value(out).to_vec())
    }

    /// Sum of target log-probabilities, see [`sequence_logprob`].
    pub fn sequence_logprob(&self, framed: &TokenSeq, target_start: usize) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let (lp, _) = sequence_logprob(&mut tape, &pv, &self.config, framed, target_start)?;
        Ok(tape.scalar_value(lp))
    }

    /// Writes `model.json` (manifest) and `model.bin` (payload) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        write_tensor_file(dir, "model", &self.config, &self.tensors)
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let (config, tensors) = read_tensor_file(dir, "model")?;
        ModelParams::from_tensors(config, tensors).map_err(|e| ModelError::Checkpoint {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Parameter handles on one tape, in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[idx::FIRST_LAYER + l * PER_LAYER + k]
    }

    fn tail(&self, k: usize) -> Var {
        self.vars[self.vars.len() - 3 + k]
    }
}

/// Full forward pass: `[len, vocab]` log-probabilities where row `t` is the
/// distribution of token `t + 1` given tokens `0..=t`.
pub fn forward(tape: &mut Tape, pv: &ParamVars, config: &ModelConfig, tokens: &[u32]) -> Result<Var, ModelError> {
    forward_impl(tape, pv, config, tokens, false)
}

fn forward_impl(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[u32],
    last_only: bool,
) -> Result<Var, ModelError> {
    let n = tokens.len();
    if n == 0 {
        return Err(ModelError::EmptySequence);
    }
    if n > config.max_seq_len {
        return Err(ModelError::TooLong {
            len: n,
            max: config.max_seq_len,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.embedding(pv.vars[idx::TOK], &ids)?;
    let pos = tape.embedding(pv.vars[idx::POS], &positions)?;
    let mut x = tape.add(tok, pos)?;

    let d = config.d_model;
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..config.n_layers {
        let h = tape.layer_norm(x, pv.layer(l, 0), pv.layer(l, 1), LN_EPS)?;
        let qkv = tape.matmul(h, pv.layer(l, 2))?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let q = tape.slice(qkv, 1, hd * dh, (hd + 1) * dh)?;
            let k = tape.slice(qkv, 1, d + hd * dh, d + (hd + 1) * dh)?;
            let v = tape.slice(qkv, 1, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let scores = tape.causal_mask(scores)?;
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, v)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let o = tape.matmul(cat, pv.layer(l, 3))?;
        let o = tape.add_bias(o, pv.layer(l, 4))?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, pv.layer(l, 5), pv.layer(l, 6), LN_EPS)?;
        let m = tape.matmul(h, pv.layer(l, 7))?;
        let m = tape.add_bias(m, pv.layer(l, 8))?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, pv.layer(l, 9))?;
        let m = tape.add_bias(m, pv.layer(l, 10))?;
        x = tape.add(x, m)?;
    }
    if last_only {
        x = tape.slice(x, 0, n - 1, n)?;
    }
    let x = tape.layer_norm(x, pv.tail(0), pv.tail(1), LN_EPS)?;
    let emb_t = tape.transpose(pv.vars[idx::TOK])?;
    let logits = tape.matmul(x, emb_t)?;
    let logits = tape.add_bias(logits, pv.tail(2))?;
    Ok(tape.log_softmax(logits, 1)?)
}

/// Sums `log p(framed[t] | framed[..t])` over target positions
/// `t in target_start..len`, skipping PAD. Returns the scalar handle and the
/// number of summed positions.
pub fn sequence_logprob(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    framed: &TokenSeq,
    target_start: usize,
) -> Result<(Var, usize), ModelError> {
    let len = framed.unpadded_len();
    if target_start == 0 || target_start >= len {
        return Err(ModelError::TargetStart {
            target_start,
            len: framed.len(),
        });
    }
    // Causality makes the trailing padding irrelevant to earlier rows.
    let tokens = &framed.ids()[..len];
    let lp = forward(tape, pv, config, tokens)?;
    target_logprob(tape, lp, tokens, target_start)
}

/// Gathers and sums target log-probabilities from a `[len, vocab]` matrix of
/// next-token log-probabilities.
pub fn target_logprob(
    tape: &mut Tape,
    log_probs: Var,
    tokens: &[u32],
    target_start: usize,
) -> Result<(Var, usize), ModelError> {
    let len = tokens.len();
    if target_start == 0 || target_start >= len {
        return Err(ModelError::TargetStart { target_start, len });
    }
    let targets: Vec<(usize, usize)> = (target_start..len)
        .filter(|&t| tokens[t] != PAD)
        .map(|t| (t - 1, tokens[t] as usize))
        .collect();
    let rows = tape.slice(log_probs, 0, target_start - 1, len - 1)?;
    let vocab = tape.shape(log_probs)[1];
    // Weight each (row, token) cell; PAD positions get weight zero.
    let mut weights = vec![0.0; (len - target_start) * vocab];
    for &(row, tok) in &targets {
        weights[(row + 1 - target_start) * vocab + tok] = 1.0;
    }
    let s = tape.dot_const(rows, &weights)?;
    Ok((s, targets.len()))
}

/// Inference-only forward over one token at a time, caching each layer's
/// keys and values. Produces the same distributions as [`forward`] up to
/// floating-point summation order.
pub struct KvCache<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * rs * g + b)
        .collect()
}

/// `x @ w` for a row vector and a row-major `[x.len(), cols]` matrix.
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

impl<'a> KvCache<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let n = params.config.n_layers;
        KvCache {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn t(&self, i: usize) -> &[f64] {
        self.params.tensors[i].1.data()
    }

    /// Appends `token` and returns next-token log-probabilities.
    pub fn push(&mut self, token: u32) -> Result<Vec<f64>, ModelError> {
        let c = self.params.config;
        if self.len >= c.max_seq_len {
            return Err(ModelError::TooLong {
                len: self.len + 1,
                max: c.max_seq_len,
            });
        }
        let (d, dh) = (c.d_model, c.head_dim());
        let tok = token as usize;
        let mut x: Vec<f64> = self.t(idx::TOK)[tok * d..(tok + 1) * d]
            .iter()
            .zip(&self.t(idx::POS)[self.len * d..(self.len + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let n = self.len + 1;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let p = |k: usize| idx::FIRST_LAYER + l * PER_LAYER + k;
            let h = layer_norm_row(&x, self.t(p(0)), self.t(p(1)));
            let qkv = vec_mat(&h, self.t(p(2)), 3 * d);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut cat = vec![0.0; d];
            for hd in 0..c.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let scores: Vec<f64> = (0..n)
                    .map(|t| {
                        let k = &keys[t * d + hd * dh..t * d + (hd + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (t, w) in e.iter().enumerate() {
                    let v = &values[t * d + hd * dh..t * d + (hd + 1) * dh];
                    for (o, vv) in cat[hd * dh..(hd + 1) * dh].iter_mut().zip(v) {
                        *o += w / z * vv;
                    }
                }
            }
            let o = vec_mat(&cat, self.t(p(3)), d);
            for ((xv, ov), b) in x.iter_mut().zip(&o).zip(self.t(p(4))) {
                *xv += ov + b;
            }
            let h = layer_norm_row(&x, self.t(p(5)), self.t(p(6)));
            let mut m = vec_mat(&h, self.t(p(7)), c.d_ff);
            for (mv, b) in m.iter_mut().zip(self.t(p(8))) {
                *mv = crate::tensor::gelu(*mv + b);
            }
            let m = vec_mat(&m, self.t(p(9)), d);
            for ((xv, mv), b) in x.iter_mut().zip(&m).zip(self.t(p(10))) {
                *xv += mv + b;
            }
        }
        let tail = self.params.tensors.len() - 3;
        let h = layer_norm_row(&x, self.t(tail), self.t(tail + 1));
        let emb = self.t(idx::TOK);
        let bias = self.t(tail + 2);
        let logits: Vec<f64> = (0..c.vocab_size)
            .map(|v| h.iter().zip(&emb[v * d..(v + 1) * d]).map(|(a, b)| a * b).sum::<f64>() + bias[v])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        self.len = n;
        Ok(logits.into_iter().map(|z| z - lse).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config: ModelConfig,
    payload: String,
    tensors: Vec<ManifestEntry>,
}

const FORMAT_TAG: &str = "cpoforge-tensors-v1";

/// Writes `<stem>.json` (names, shapes, byte offsets) and `<stem>.bin`
/// (little-endian f64 payload) into `dir`.
pub fn write_tensor_file(
    dir: &Path,
    stem: &str,
    config: &ModelConfig,
    tensors: &[(String, Tensor)],
) -> Result<(), ModelError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let bin_name = format!("{stem}.bin");
    let bin_path = dir.join(&bin_name);
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    fs::write(&bin_path, &payload).map_err(io(&bin_path))?;
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        dtype: "f64-le".into(),
        config: *config,
        payload: bin_name,
        tensors: entries,
    };
    let json_path = dir.join(format!("{stem}.json"));
    let mut f = fs::File::create(&json_path).map_err(io(&json_path))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| ModelError::Checkpoint {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    f.write_all(b"\n").map_err(io(&json_path))?;
    Ok(())
}

/// Reads a tensor file written by [`write_tensor_file`].
pub fn read_tensor_file(dir: &Path, stem: &str) -> Result<(ModelConfig, Vec<(String, Tensor)>), ModelError> {
    let json_path = dir.join(format!("{stem}.json"));
    let ck = |message: String| ModelError::Checkpoint {
        path: json_path.clone(),
        message,
    };
    let text = fs::read_to_string(&json_path).map_err(|source| ModelError::Io {
        path: json_path.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ck(e.to_string()))?;
    if manifest.format != FORMAT_TAG || manifest.dtype != "f64-le" {
        return Err(ck(format!(
            "unsupported format {} / dtype {}",
            manifest.format, manifest.dtype
        )));
    }
    let bin_path = dir.join(&manifest.payload);
    let payload = fs::read(&bin_path).map_err(|source| ModelError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        if len != numel * 8 || start + len > payload.len() {
            return Err(ck(format!("tensor {} has inconsistent offset/size", e.name)));
        }
        let data = payload[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| ck(err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok((manifest.config, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode, frame_pair, BOS, EOS, SEP};
    use rand::{Rng, SeedableRng};

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            max_seq_len: 32,
            vocab_size: VOCAB_SIZE,
        }
    }

    fn uniform(config: ModelConfig) -> ModelParams {
        let mut p = ModelParams::init(config, 1).unwrap();
        p.get_mut("tok_emb").unwrap().data_mut().fill(0.0);
        p
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.vocab_size = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let p = uniform(small());
        let lp = p.log_probs(&TokenSeq::new(vec![BOS, 65, 66, SEP])).unwrap();
        let expected = -(VOCAB_SIZE as f64).ln();
        for &v in lp.data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn kv_cache_matches_full_forward() {
        let p = ModelParams::init_with_std(small(), 9, 0.4).unwrap();
        let toks = [BOS, 72, 105, 32, 200, SEP, 7, 0, 255, EOS];
        let full = p.log_probs(&TokenSeq::new(toks.to_vec())).unwrap();
        let mut cache = KvCache::new(&p);
        for (t, &tok) in toks.iter().enumerate() {
            let row = cache.push(tok).unwrap();
            let want = &full.data()[t * VOCAB_SIZE..(t + 1) * VOCAB_SIZE];
            for (a, b) in row.iter().zip(want) {
                assert!((a - b).abs() < 1e-10, "pos {t}: {a} vs {b}");
            }
        }
        let short = ModelParams::init(ModelConfig { max_seq_len: 3, ..small() }, 0).unwrap();
        let mut c = KvCache::new(&short);
        c.push(BOS).unwrap();
        c.push(1).unwrap();
        c.push(2).unwrap();
        assert_eq!(c.len(), 3);
        assert!(matches!(c.push(3), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn rows_are_normalized() {
        let p = ModelParams::init_with_std(small(), 5, 0.5).unwrap();
        let toks = TokenSeq::new(vec![BOS, 1, 2, 3, 200, SEP, 44, EOS]);
        let lp = p.log_probs(&toks).unwrap();
        for row in lp.data().chunks(VOCAB_SIZE) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-9, "{lse}");
        }
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let p = ModelParams::init_with_std(small(), 7, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.random_range(3..20);
            let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..260)).collect();
            let t = rng.random_range(1..n);
            let mut b = a.clone();
            for x in b.iter_mut().skip(t + 1) {
                *x = rng.random_range(0..260);
            }
            let la = p.log_probs(&TokenSeq::new(a)).unwrap();
            let lb = p.log_probs(&TokenSeq::new(b)).unwrap();
            let k = (t + 1) * VOCAB_SIZE;
            assert_eq!(&la.data()[..k], &lb.data()[..k]);
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let p = uniform(small());
        let err = p.log_probs(&TokenSeq::new(vec![65; 33])).unwrap_err();
        assert!(matches!(err, ModelError::TooLong { len: 33, max: 32 }));
    }

    #[test]
    fn uniform_sequence_logprob() {
        let p = uniform(small());
        let f = frame_pair(&encode("ab"), &encode("xyz"));
        let lp = p.sequence_logprob(&f.tokens, f.target_start).unwrap();
        // 3 target bytes + EOS
        assert!((lp + 4.0 * (VOCAB_SIZE as f64).ln()).abs() < 1e-9);

        let f = frame_pair(&encode("ab"), &TokenSeq::default());
        let lp = p.sequence_logprob(&f.tokens, f.target_start).unwrap();
        assert!((lp + (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn target_start_out_of_range() {
        let p = uniform(small());
        let f = frame_pair(&encode("ab"), &encode("c"));
        assert!(p.sequence_logprob(&f.tokens, f.tokens.len()).is_err());
        assert!(p.sequence_logprob(&f.tokens, 0).is_err());
    }

    #[test]
    fn padding_after_eos_is_ignored() {
        let p = ModelParams::init_with_std(small(), 2, 0.2).unwrap();
        let f = frame_pair(&encode("hi"), &encode("ola"));
        let base = p.sequence_logprob(&f.tokens, f.target_start).unwrap();
        let mut padded = f.tokens.clone();
        padded.pad_to(f.tokens.len() + 5);
        let with_pad = p.sequence_logprob(&padded, f.target_start).unwrap();
        assert_eq!(base, with_pad);
    }

    #[test]
    fn vocab4_hand_computed_target_logprob() {
        // Three rows of logits over a 4-symbol vocabulary; tokens [0, 2, 1].
        // Target starts at position 1, so the terms are row0[2] and row1[1].
        let logits = [[1.0, 2.0, 0.5, -1.0], [0.0, 0.0, 3.0, 1.0], [5.0, 5.0, 5.0, 5.0]];
        let lse = |r: &[f64; 4]| r.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let expected = (logits[0][2] - lse(&logits[0])) + (logits[1][1] - lse(&logits[1]));

        let mut tape = Tape::new();
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let x = tape.constant(&Tensor::new(vec![3, 4], flat).unwrap());
        let lp = tape.log_softmax(x, 1).unwrap();
        let (s, count) = target_logprob(&mut tape, lp, &[0, 2, 1], 1).unwrap();
        assert_eq!(count, 2);
        assert!((tape.scalar_value(s) - expected).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(small(), 9).unwrap();
        p.save(dir.path()).unwrap();
        let back = ModelParams::load(dir.path()).unwrap();
        assert_eq!(p, back);
        let bin = fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(bin.len(), p.num_parameters() * 8);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(small(), 9).unwrap();
        let mut wrong = small();
        wrong.d_ff = 64;
        write_tensor_file(dir.path(), "model", &wrong, p.tensors()).unwrap();
        assert!(ModelParams::load(dir.path()).is_err());
    }
}
