//! Templated "software UI" corpus where every English verb has an
//! off-domain and a house-style translation, e.g. "store" → "grava"
//! (off-domain) vs "armazena" (preferred).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cpoforge::corpus::Corpus;
use cpoforge::model::{ModelConfig, ModelParams};
use cpoforge::objectives::{CpoConfig, Example, Objective};
use cpoforge::prefgen::{synthesize, PreferenceTriplet};
use cpoforge::tokenizer::{encode, frame_pair, VOCAB_SIZE};
use cpoforge::trainer::{train, TrainConfig, Trainer};

/// (english, off-domain, preferred)
pub const VERBS: [(&str, &str, &str); 16] = [
    ("store", "grava", "armazena"),
    ("delete", "apaga", "exclui"),
    ("show", "mostra", "exibe"),
    ("change", "muda", "altera"),
    ("send", "manda", "envia"),
    ("search", "procura", "pesquisa"),
    ("finish", "acaba", "conclui"),
    ("print", "tira", "imprime"),
    ("start", "começa", "inicia"),
    ("fix", "conserta", "corrige"),
    ("get", "pega", "obtém"),
    ("keep", "guarda", "mantém"),
    ("use", "usa", "utiliza"),
    ("check", "olha", "verifica"),
    ("add", "põe", "adiciona"),
    ("remove", "arranca", "remove"),
];

pub const NOUNS: [(&str, &str); 32] = [
    ("file", "o arquivo"), ("folder", "a pasta"), ("report", "o relatório"), ("message", "a mensagem"),
    ("image", "a imagem"), ("document", "o documento"), ("table", "a tabela"), ("list", "a lista"),
    ("page", "a página"), ("user", "o usuário"), ("account", "a conta"), ("password", "a senha"),
    ("profile", "o perfil"), ("window", "a janela"), ("menu", "o menu"), ("button", "o botão"),
    ("link", "o link"), ("note", "a nota"), ("task", "a tarefa"), ("project", "o projeto"),
    ("contact", "o contato"), ("event", "o evento"), ("invoice", "a fatura"), ("order", "o pedido"),
    ("price", "o preço"), ("chart", "o gráfico"), ("backup", "o backup"), ("filter", "o filtro"),
    ("comment", "o comentário"), ("title", "o título"), ("photo", "a foto"), ("map", "o mapa"),
];

pub struct Sentence {
    pub source: String,
    pub off_domain: String,
    pub preferred: String,
}

/// All 512 verb × noun sentences.
pub fn sentences() -> Vec<Sentence> {
    let mut out = Vec::with_capacity(VERBS.len() * NOUNS.len());
    for (en_v, off, pref) in VERBS {
        for (en_n, pt_n) in NOUNS {
            out.push(Sentence {
                source: format!("{en_v} the {en_n}"),
                off_domain: format!("{off} {pt_n}"),
                preferred: format!("{pref} {pt_n}"),
            });
        }
    }
    out
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 64,
        vocab_size: VOCAB_SIZE,
    }
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub model: ModelConfig,
    pub warm_steps: usize,
    pub warm_lr: f64,
    pub k: usize,
    pub test: usize,
    pub batch: usize,
    pub lr: f64,
    /// Optimizer steps for both CPO (on K triplets) and SFT (on 4K pairs).
    pub steps: usize,
    pub beta: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            model: model_config(),
            // 200 steps leaves the model on a frequent-letter plateau.
            warm_steps: 800,
            warm_lr: 3e-3,
            k: 64,
            test: 128,
            batch: 16,
            lr: 3e-3,
            steps: 64,
            beta: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub seed: u64,
    pub warm_exact_off_domain: f64,
    pub cpo_pref_accuracy: f64,
    pub sft_pref_accuracy: f64,
    pub warm_nll: f64,
    pub cpo_nll: f64,
    pub sft_nll: f64,
    /// SFT on the same K pairs the CPO run saw.
    pub sft_k_nll: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_steps(params: ModelParams, data: &[Example], objective: Objective, steps: usize, batch: usize, lr: f64, beta: f64, seed: u64) -> ModelParams {
    // Whole epochs over `data`, as many as needed to reach `steps`.
    let per_epoch = data.len().div_ceil(batch);
    assert_eq!(steps % per_epoch, 0, "steps must be a whole number of epochs");
    let config = TrainConfig {
        batch_size: batch,
        grad_accum: 1,
        lr_peak: lr,
        warmup_steps: steps / 10,
        epochs: steps / per_epoch,
        seed,
        checkpoint_every: steps,
        objective,
        shuffle: true,
    };
    let cpo = CpoConfig { beta, ..CpoConfig::default() };
    train(params, data, &config, &cpo, None).expect("training").params
}

fn nll(params: &ModelParams, items: &[(String, String)]) -> f64 {
    let total: f64 = items
        .iter()
        .map(|(s, c)| {
            let f = frame_pair(&encode(s), &encode(c));
            -params.sequence_logprob(&f.tokens, f.target_start).unwrap()
        })
        .sum();
    total / items.len() as f64
}

fn pref_accuracy(params: &ModelParams, triplets: &[PreferenceTriplet]) -> f64 {
    let usable: Vec<&PreferenceTriplet> = triplets.iter().filter(|t| !t.degenerate).collect();
    let wins = usable
        .iter()
        .filter(|t| {
            let c = frame_pair(&encode(&t.source), &encode(&t.chosen));
            let r = frame_pair(&encode(&t.source), &encode(&t.rejected));
            params.sequence_logprob(&c.tokens, c.target_start).unwrap()
                > params.sequence_logprob(&r.tokens, r.target_start).unwrap()
        })
        .count();
    wins as f64 / usable.len() as f64
}

/// SFT on the off-domain variant of every sentence, so the model starts out
/// preferring the wrong verbs.
pub fn warm_model(seed: u64, p: &Protocol) -> ModelParams {
    let all = sentences();
    let init = ModelParams::init(p.model, seed).unwrap();
    let warm_data: Vec<Example> = all.iter().map(|s| Example::pair(&s.source, &s.off_domain)).collect();
    let per_epoch = warm_data.len().div_ceil(p.batch);
    let config = TrainConfig {
        batch_size: p.batch,
        grad_accum: 1,
        lr_peak: p.warm_lr,
        warmup_steps: p.warm_steps / 10,
        epochs: p.warm_steps.div_ceil(per_epoch),
        seed,
        checkpoint_every: p.warm_steps,
        objective: Objective::Sft,
        shuffle: true,
    };
    let mut t = Trainer::new(init, config, CpoConfig::default()).unwrap();
    t.run(&warm_data, Some(p.warm_steps)).unwrap();
    t.params().clone()
}

pub fn run(seed: u64, p: &Protocol) -> Outcome {
    run_from(seed, p, warm_model(seed, p))
}

pub fn run_from(seed: u64, p: &Protocol, warm: ModelParams) -> Outcome {
    let all = sentences();

    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xD0_0D));
    let (test_idx, pool) = order.split_at(p.test);
    let cpo_idx = &pool[..p.k];
    let sft_idx = &pool[..4 * p.k];

    let corpus = |idx: &[usize]| {
        Corpus::from_texts("domain", "en-pt", idx.iter().map(|&i| (all[i].source.clone(), all[i].preferred.clone()))).unwrap()
    };
    let cpo_set = synthesize(&warm, &corpus(cpo_idx), 40, "warm", seed).unwrap();
    let test_set = synthesize(&warm, &corpus(test_idx), 40, "warm", seed).unwrap();
    let warm_exact_off_domain = test_idx
        .iter()
        .zip(&test_set.triplets)
        .filter(|(&i, t)| t.rejected == all[i].off_domain)
        .count() as f64
        / test_idx.len() as f64;

    let cpo_data: Vec<Example> = cpo_set.triplets.iter().map(Example::triplet).collect();
    let sft_data: Vec<Example> = sft_idx.iter().map(|&i| Example::pair(&all[i].source, &all[i].preferred)).collect();

    let cpo = train_steps(warm.clone(), &cpo_data, Objective::Cpo, p.steps, p.batch, p.lr, p.beta, seed);
    let sft = train_steps(warm.clone(), &sft_data, Objective::Sft, p.steps, p.batch, p.lr, p.beta, seed);
    let sft_k = train_steps(warm.clone(), &sft_data[..p.k], Objective::Sft, p.steps, p.batch, p.lr, p.beta, seed);

    let held_out: Vec<(String, String)> = test_set.triplets.iter().map(|t| (t.source.clone(), t.chosen.clone())).collect();
    Outcome {
        seed,
        warm_exact_off_domain,
        cpo_pref_accuracy: pref_accuracy(&cpo, &test_set.triplets),
        sft_pref_accuracy: pref_accuracy(&sft, &test_set.triplets),
        warm_nll: nll(&warm, &held_out),
        cpo_nll: nll(&cpo, &held_out),
        sft_nll: nll(&sft, &held_out),
        sft_k_nll: nll(&sft_k, &held_out),
    }
}
