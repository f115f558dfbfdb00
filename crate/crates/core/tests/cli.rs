mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cpoforge::model::{ModelConfig, ModelParams};
use cpoforge::tokenizer::VOCAB_SIZE;

fn cpoforge(args: &[&str]) -> Output {
    cpoforge_env(args, None)
}

fn cpoforge_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cpoforge"));
    cmd.args(args).env_remove("CPOFORGE_SEED");
    if let Some(s) = seed_env {
        cmd.env("CPOFORGE_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tm(path: &Path, pairs: &[(&str, &str)]) {
    let text: String = pairs
        .iter()
        .map(|(s, t)| format!("{}\n", serde_json::json!({"source": s, "target": t})))
        .collect();
    fs::write(path, text).unwrap();
}

fn ten_line_tm(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tm10.jsonl");
    let lines: Vec<String> = fs::read_to_string(common::toy_tm_path())
        .unwrap()
        .lines()
        .take(10)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&p, lines.concat()).unwrap();
    p
}

fn small_config_file(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("smoke.cfg");
    fs::write(
        &p,
        "# smoke run\nn_layers = 1\nd_model = 32\nn_heads = 2\nd_ff = 64\nmax_seq_len = 96\n\
         batch_size = 4\ngrad_accum = 2\nlr = 3e-3\nwarmup_steps = 4\nepochs = 4\ncheckpoint_every = 8\n",
    )
    .unwrap();
    p
}

#[test]
fn synth_pairs_counts_subset_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let tm = ten_line_tm(dir.path());
    let out = dir.path().join("pairs.jsonl");
    let tm_s = tm.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    let o = cpoforge(&["synth-pairs", "--tm", tm_s, "--checkpoint", "init", "--out", out_s, "--max-new-tokens", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("10 triplets"));
    let first = fs::read(&out).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), 10);
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["generator_checkpoint"], "init-seed42");
    }

    let o = cpoforge(&["synth-pairs", "--tm", tm_s, "--checkpoint", "init", "--out", out_s, "--max-new-tokens", "16"]);
    assert!(o.status.success());
    assert_eq!(fs::read(&out).unwrap(), first, "regeneration must be byte-identical");

    let o = cpoforge(&["synth-pairs", "--tm", tm_s, "--checkpoint", "init", "--out", out_s, "--max-new-tokens", "16", "--subset", "5"]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn seed_env_is_last_resort() {
    let dir = tempfile::tempdir().unwrap();
    let tm = ten_line_tm(dir.path());
    let out = dir.path().join("p.jsonl");
    let base = ["synth-pairs", "--tm", tm.to_str().unwrap(), "--checkpoint", "init", "--out", out.to_str().unwrap(), "--max-new-tokens", "2", "--subset", "1"];
    let o = cpoforge_env(&base, Some("7"));
    assert!(o.status.success());
    assert!(fs::read_to_string(&out).unwrap().contains("\"init-seed7\""));
    let mut with_flag = base.to_vec();
    with_flag.extend(["--seed", "9"]);
    let o = cpoforge_env(&with_flag, Some("7"));
    assert!(o.status.success());
    assert!(fs::read_to_string(&out).unwrap().contains("\"init-seed9\""));
    let o = cpoforge_env(&base, Some("seven"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_tm_names_path() {
    let o = cpoforge(&["synth-pairs", "--tm", "/nonexistent/tm.jsonl", "--checkpoint", "init", "--out", "/tmp/x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/tm.jsonl"), "{}", stderr(&o));
}

#[test]
fn train_smoke_and_objective_handling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config_file(dir.path());
    let pairs = dir.path().join("pairs.jsonl");
    let o = cpoforge(&[
        "synth-pairs", "--tm", common::toy_tm_path().to_str().unwrap(), "--checkpoint", "init",
        "--config", cfg.to_str().unwrap(), "--out", pairs.to_str().unwrap(), "--max-new-tokens", "24",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&pairs).unwrap().lines().count(), 64);

    let run = dir.path().join("cpo");
    let o = cpoforge(&[
        "train", "--objective", "cpo", "--data", pairs.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out-dir", run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let msg = stdout(&o);
    assert!(msg.contains("32 steps of 32"), "{msg}");
    assert!(msg.contains("checkpoint-8"));
    assert!(run.join("checkpoint-8/state.json").exists());
    assert!(run.join("final/model.json").exists());
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert!(last[2].parse::<f64>().unwrap().is_finite());
    assert!(!last[3].is_empty());

    let sft = dir.path().join("sft");
    let o = cpoforge(&[
        "train", "--objective", "sft", "--data", pairs.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out-dir", sft.to_str().unwrap(), "--epochs", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("8 steps of 8"));

    let o = cpoforge(&["train", "--objective", "ipo", "--data", pairs.to_str().unwrap(), "--out-dir", sft.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sft, cpo"), "{}", stderr(&o));

    let o = cpoforge(&[
        "train", "--objective", "cpo", "--data", common::toy_tm_path().to_str().unwrap(),
        "--out-dir", sft.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rejected"), "{}", stderr(&o));
}

#[test]
fn config_errors_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "batch_size = 4\nlr = fast\n").unwrap();
    let o = cpoforge(&[
        "train", "--objective", "sft", "--data", common::toy_tm_path().to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn resume_via_cli_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config_file(dir.path());
    let tm = common::toy_tm_path();
    let common_args = |out: &str| {
        vec![
            "train".to_string(), "--objective".into(), "sft".into(), "--data".into(), tm.to_str().unwrap().into(),
            "--config".into(), cfg.to_str().unwrap().into(), "--out-dir".into(), out.into(), "--shuffle".into(),
        ]
    };
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let a: Vec<String> = common_args(full.to_str().unwrap());
    assert!(cpoforge(&a.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    let mut b = common_args(part.to_str().unwrap());
    b.extend(["--stop-after".into(), "10".into()]);
    assert!(cpoforge(&b.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    assert!(!part.join("final").exists());
    let mut c = common_args(part.to_str().unwrap());
    c.extend(["--resume".into(), part.join("checkpoint-8").to_str().unwrap().into()]);
    let o = cpoforge(&c.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["final/model.bin", "final/adam_m.bin", "final/adam_v.bin", "checkpoint-24/model.bin", "loss.csv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
}

fn rigged_identity_checkpoint(dir: &Path) {
    let config = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 32,
        vocab_size: VOCAB_SIZE,
    };
    let mut p = ModelParams::init(config, 0).unwrap();
    p.get_mut("tok_emb").unwrap().data_mut().fill(0.0);
    p.get_mut("lm_head.bias").unwrap().data_mut()[b'a' as usize] = 10.0;
    p.save(dir).unwrap();
}

#[test]
fn evaluate_identity_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("identity");
    rigged_identity_checkpoint(&ck);
    let test = dir.path().join("test.jsonl");
    write_tm(&test, &[("go", "aaaa"), ("run", "aaaa")]);
    let sft_csv = dir.path().join("sft.csv");
    let o = cpoforge(&[
        "evaluate", "--checkpoint", ck.to_str().unwrap(), "--size", "1k", "--test", test.to_str().unwrap(),
        "--out", sft_csv.to_str().unwrap(), "--system", "SFT", "--max-new-tokens", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&sft_csv).unwrap(),
        "system,size,bleu,chrfpp,ter,external\nSFT,1k,100.00,100.00,0.00,\n"
    );

    let cpo_csv = dir.path().join("cpo.csv");
    fs::write(&cpo_csv, "system,size,bleu,chrfpp,ter,external\nCPO,1k,50.00,60.00,40.00,\n").unwrap();
    let table = dir.path().join("cmp/report.csv");
    let o = cpoforge(&["compare", "--sft", sft_csv.to_str().unwrap(), "--cpo", cpo_csv.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&table).unwrap(),
        "size,system,bleu,chrfpp,ter\n1k,SFT,100.00,100.00,0.00\n1k,CPO,50.00,60.00,40.00\n"
    );
    assert!(dir.path().join("cmp/plotdata.csv").exists());

    fs::write(&cpo_csv, "system,size,bleu,chrfpp,ter,external\nCPO,2k,50.00,60.00,40.00,\n").unwrap();
    let o = cpoforge(&["compare", "--sft", sft_csv.to_str().unwrap(), "--cpo", cpo_csv.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no overlapping sizes"));

    let ext = dir.path().join("ext.jsonl");
    fs::write(&ext, "{\"system\":\"SFT\",\"size\":\"1K\",\"score\":90.0}\n").unwrap();
    let o = cpoforge(&[
        "evaluate", "--checkpoint", ck.to_str().unwrap(), "--size", "1k", "--test", test.to_str().unwrap(),
        "--out", sft_csv.to_str().unwrap(), "--system", "SFT", "--max-new-tokens", "4", "--external", ext.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(SFT, 1K)"));
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["synth-pairs", "train", "evaluate", "compare"] {
        let o = cpoforge(&[sub, "--help"]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("--"), "{sub}");
    }
    assert_eq!(cpoforge(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn full_pipeline_on_toy_corpus() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let tm = common::toy_tm_path();
    let pairs = dir.path().join("pairs.jsonl");
    let o = cpoforge(&["synth-pairs", "--tm", tm.to_str().unwrap(), "--checkpoint", "init", "--out", pairs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let o = cpoforge(&[
        "train", "--objective", "cpo", "--data", pairs.to_str().unwrap(), "--out-dir", run.to_str().unwrap(),
        "--epochs", "2", "--checkpoint-every", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = dir.path().join("report.csv");
    let o = cpoforge(&[
        "evaluate", "--checkpoint", run.join("checkpoint-2").to_str().unwrap(), "--checkpoint",
        run.join("final").to_str().unwrap(), "--size", "64", "--size", "128", "--test", tm.to_str().unwrap(),
        "--out", report.to_str().unwrap(), "--system", "CPO",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let elapsed = start.elapsed();
    eprintln!("pipeline: {elapsed:.1?}");
    assert!(elapsed < Duration::from_secs(600));
}
