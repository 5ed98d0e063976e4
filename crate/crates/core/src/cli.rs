//! The `attnlink` command line.
//!
//! Every subcommand writes only under its `--out-dir`, and finishes by
//! writing `manifest.json`: the resolved configuration, the seed, and the
//! SHA-256 of each artifact it produced.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{LinkPlacement, ModelConfig};
use crate::data::{build_vocab, gen_toy_task, load_parallel_tsv, Sentence, TaskKind, ToyTask};
use crate::error::{Error, Result};
use crate::eval::{attention_entropy, attention_inputs, collect_attention, corpus_bleu, dump_attention, translate};
use crate::theory::{lemma1_witness, simulate_robustness, GammaMode, SimConfig};
use crate::train::{evaluate_examples, prepare, train, TrainConfig, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "attnlink", version, about = "Transformer with attention links: data, training, evaluation, analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus as TSV.
    GenData(GenDataArgs),
    /// Train a model from a flat JSON run config.
    Train(TrainArgs),
    /// Greedy-decode a test set and score it with BLEU.
    Evaluate(EvaluateArgs),
    /// Write every attention matrix for one sentence pair.
    DumpAttention(DumpArgs),
    /// Monte Carlo comparison of noisy single-layer vs averaged attention.
    SimulateTheory(SimulateArgs),
    /// Check that λ = 0 links reproduce the plain model exactly.
    Lemma1Check(Lemma1Args),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// copy, reverse or mapped_shuffle
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 1000)]
    n_pairs: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 15)]
    max_len: usize,
    /// Size of the content alphabet.
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also hold out this many pairs from the end as `test.tsv`.
    #[arg(long)]
    test_pairs: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat JSON run config (a previous manifest also works).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    placement: Option<LinkPlacement>,
    #[arg(long)]
    link_scale: Option<f64>,
    #[arg(long)]
    train_tsv: Option<PathBuf>,
    #[arg(long)]
    valid_tsv: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set base_lr=0.001`; values are
    /// read as JSON, falling back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print one metrics line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Longest hypothesis; defaults to the model's limit.
    #[arg(long)]
    max_len: Option<usize>,
    /// Also write the attention entropy report.
    #[arg(long)]
    entropy: bool,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Space-separated source tokens.
    #[arg(long)]
    src: String,
    /// Space-separated target tokens.
    #[arg(long)]
    tgt: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON `SimConfig`; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    normalize: bool,
    /// Perturb the previous layer's logits by this std instead of copying.
    #[arg(long)]
    gamma_std: Option<f64>,
    /// Also write per-trial errors as CSV.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct Lemma1Args {
    /// JSON `ModelConfig`; otherwise a toy config from the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value = "both")]
    placement: LinkPlacement,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    n_inputs: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Data-side keys of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_tsv: PathBuf,
    #[serde(default)]
    pub valid_tsv: Option<PathBuf>,
    /// Vocabulary size per side, reserved ids included.
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_max_vocab() -> usize {
    10_000
}

/// Model, training and data settings read from one flat JSON object.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("configs are JSON objects"),
    }
}

impl RunConfig {
    /// Splits a flat object into its three parts. `vocab_sizes` fills
    /// `src_vocab`/`tgt_vocab` when the object leaves them out.
    pub fn from_flat(flat: &Map<String, Value>, vocab_sizes: Option<(usize, usize)>) -> Result<Self> {
        let model_keys = keys_of(&ModelConfig::toy(8, 1, 1, 8));
        let train_keys = keys_of(&TrainConfig::default());
        let data_keys = ["train_tsv", "valid_tsv", "max_vocab", "out_dir"];
        let (mut model, mut train, mut data) = (Map::new(), Map::new(), Map::new());
        let mut problems = Vec::new();
        for (k, v) in flat {
            if model_keys.contains(k) {
                model.insert(k.clone(), v.clone());
            } else if train_keys.contains(k) {
                train.insert(k.clone(), v.clone());
            } else if data_keys.contains(&k.as_str()) {
                data.insert(k.clone(), v.clone());
            } else {
                problems.push(format!("unknown key `{k}`"));
            }
        }
        if let Some((s, t)) = vocab_sizes {
            model.entry("src_vocab").or_insert(json!(s));
            model.entry("tgt_vocab").or_insert(json!(t));
        }
        let model: Option<ModelConfig> = serde_json::from_value(Value::Object(model))
            .map_err(|e| problems.push(format!("model: {e}")))
            .ok();
        let train: Option<TrainConfig> = serde_json::from_value(Value::Object(train))
            .map_err(|e| problems.push(format!("train: {e}")))
            .ok();
        let data: Option<DataConfig> = serde_json::from_value(Value::Object(data))
            .map_err(|e| problems.push(format!("data: {e}")))
            .ok();
        for r in [
            model.as_ref().map(ModelConfig::validate),
            train.as_ref().map(TrainConfig::validate),
        ]
        .into_iter()
        .flatten()
        {
            if let Err(Error::Config(p)) = r {
                problems.extend(p);
            }
        }
        if let Some(d) = &data {
            if d.max_vocab < 5 {
                problems.push(format!("max_vocab {} must be at least 5", d.max_vocab));
            }
        }
        match (model, train, data) {
            (Some(model), Some(train), Some(data)) if problems.is_empty() => Ok(Self { model, train, data }),
            _ => Err(Error::Config(problems)),
        }
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        for v in [
            serde_json::to_value(&self.model),
            serde_json::to_value(&self.train),
            serde_json::to_value(&self.data),
        ] {
            if let Ok(Value::Object(m)) = v {
                out.extend(m);
            }
        }
        out
    }
}

/// Parses `KEY=VALUE`; the value is JSON if it parses, else a string.
fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{s}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// What a finished subcommand reports back for its manifest.
struct Outcome {
    out_dir: PathBuf,
    config: Value,
    seed: Option<u64>,
    artifacts: Vec<&'static str>,
}

fn write_manifest(command: &str, o: &Outcome) -> Result<()> {
    let mut hashes = Map::new();
    for name in &o.artifacts {
        hashes.insert(name.to_string(), json!(sha256_file(&o.out_dir.join(name))?));
    }
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": o.seed,
        "resolved_config": o.config,
        "artifacts": hashes,
    });
    write_json(&o.out_dir.join("manifest.json"), &manifest)
}

fn tokens(s: &str) -> Sentence {
    s.split_whitespace().map(str::to_string).collect()
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let task = ToyTask {
        kind: TaskKind::parse(&a.task)?,
        n_pairs: a.n_pairs,
        min_len: a.min_len,
        max_len: a.max_len,
        vocab_size: a.vocab_size,
        seed: a.seed,
    };
    let corpus = gen_toy_task(&task)?;
    let split = match a.test_pairs {
        Some(n) => {
            let (tr, te) = corpus.split_tail(n)?;
            (tr, Some(te))
        }
        None => (corpus, None),
    };
    ensure_dir(&a.out_dir)?;
    split.0.write_tsv(&a.out_dir.join("train.tsv"))?;
    let mut artifacts = vec!["train.tsv"];
    if let Some(te) = &split.1 {
        te.write_tsv(&a.out_dir.join("test.tsv"))?;
        artifacts.push("test.tsv");
    }
    let mut config = serde_json::to_value(&task)?;
    config["test_pairs"] = json!(a.test_pairs);
    Ok(Outcome {
        out_dir: a.out_dir.clone(),
        config,
        seed: Some(a.seed),
        artifacts,
    })
}

/// File config, then named flags, then `--set` overrides.
fn train_flat_config(a: &TrainArgs) -> Result<Map<String, Value>> {
    let mut flat = match &a.config {
        Some(path) => match read_json(path)? {
            Value::Object(mut m) => match m.remove("resolved_config") {
                Some(Value::Object(inner)) => inner,
                Some(_) => return Err(Error::invalid("manifest has a non-object resolved_config")),
                None => m,
            },
            _ => return Err(Error::invalid("run config must be a JSON object")),
        },
        None => Map::new(),
    };
    let mut put = |k: &str, v: Value| {
        flat.insert(k.to_string(), v);
    };
    if let Some(v) = a.seed {
        put("seed", json!(v));
    }
    if let Some(v) = a.epochs {
        put("max_epochs", json!(v));
    }
    if let Some(v) = a.max_steps {
        put("max_steps", json!(v));
    }
    if let Some(v) = a.placement {
        put("link_placement", serde_json::to_value(v)?);
    }
    if let Some(v) = a.link_scale {
        put("link_scale", json!(v));
    }
    if let Some(v) = &a.train_tsv {
        put("train_tsv", json!(v));
    }
    if let Some(v) = &a.valid_tsv {
        put("valid_tsv", json!(v));
    }
    if let Some(v) = &a.out_dir {
        put("out_dir", json!(v));
    }
    for s in &a.set {
        let (k, v) = parse_override(s)?;
        put(&k, v);
    }
    Ok(flat)
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let flat = train_flat_config(a)?;
    // Validate everything that does not need the data first.
    let data: DataConfig = serde_json::from_value(Value::Object(
        flat.iter()
            .filter(|(k, _)| ["train_tsv", "valid_tsv", "max_vocab", "out_dir"].contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    ))
    .map_err(|e| Error::Config(vec![format!("data: {e}")]))?;
    RunConfig::from_flat(&flat, Some((data.max_vocab, data.max_vocab)))?;
    let out_dir = data
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config(vec!["out_dir is required (config key or --out-dir)".into()]))?;

    let corpus = load_parallel_tsv(&data.train_tsv)?;
    let valid = data.valid_tsv.as_deref().map(load_parallel_tsv).transpose()?;
    let (sv, tv) = build_vocab(&corpus, data.max_vocab)?;
    let run = RunConfig::from_flat(&flat, Some((sv.len(), tv.len())))?;
    if run.model.src_vocab != sv.len() || run.model.tgt_vocab != tv.len() {
        return Err(Error::Config(vec![format!(
            "config vocab sizes {}/{} do not match the data ({}/{})",
            run.model.src_vocab,
            run.model.tgt_vocab,
            sv.len(),
            tv.len()
        )]));
    }

    ensure_dir(&out_dir)?;
    let resolved = Value::Object(run.to_flat());
    write_json(&out_dir.join("resolved_config.json"), &resolved)?;
    let outcome = train(&run.model, &run.train, &corpus, &sv, &tv, TrainOptions {
        valid: valid.as_ref(),
        out_dir: Some(&out_dir),
        init: None,
        verbose: a.verbose,
    })?;
    if let Some(m) = outcome.metrics.last() {
        println!(
            "epoch {} step {} loss {:.4} token_accuracy {:.4}",
            m.epoch, m.step, m.loss, m.token_accuracy
        );
    }
    Ok(Outcome {
        out_dir,
        config: resolved,
        seed: Some(run.train.seed),
        artifacts: vec!["resolved_config.json", "metrics.jsonl", "checkpoint.json"],
    })
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let test = load_parallel_tsv(&a.test)?;
    let params = ck.params()?;
    let (sv, tv) = ck.vocabs()?;
    let cfg = &ck.model;
    let max_len = a.max_len.unwrap_or(cfg.max_len - 1);

    let sources: Vec<Sentence> = test.pairs.iter().map(|(s, _)| s.clone()).collect();
    let refs: Vec<Sentence> = test.pairs.iter().map(|(_, t)| t.clone()).collect();
    let hyps = translate(&params, cfg, &sv, &tv, &sources, max_len)?;
    let bleu = corpus_bleu(&hyps, &refs)?;
    let acc = evaluate_examples(&params, cfg, &prepare(&test, &sv, &tv), 0.0, 4096)?;

    ensure_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("bleu.json"), &bleu.report_json())?;
    let text: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
    let hyp_path = a.out_dir.join("hypotheses.txt");
    fs::write(&hyp_path, text).map_err(|e| Error::io(&hyp_path, e))?;
    let summary = json!({
        "sentences": test.len(),
        "bleu": bleu.score,
        "bleu_x100": bleu.score * 100.0,
        "token_accuracy": acc.correct as f64 / acc.tokens as f64,
        "breakdown": bleu,
    });
    write_json(&a.out_dir.join("eval_summary.json"), &summary)?;
    let mut artifacts = vec!["bleu.json", "hypotheses.txt", "eval_summary.json"];
    if a.entropy {
        let maps = collect_attention(&params, cfg, &attention_inputs(&test, &sv, &tv))?;
        write_json(&a.out_dir.join("entropy.json"), &attention_entropy(&maps)?)?;
        artifacts.push("entropy.json");
    }
    println!("BLEU = {:.2}", bleu.score * 100.0);
    Ok(Outcome {
        out_dir: a.out_dir.clone(),
        config: json!({
            "checkpoint": a.checkpoint,
            "checkpoint_sha256": sha256_file(&a.checkpoint)?,
            "test": a.test,
            "max_len": max_len,
            "entropy": a.entropy,
        }),
        seed: Some(ck.seed),
        artifacts,
    })
}

fn dump_cmd(a: &DumpArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (sv, tv) = ck.vocabs()?;
    let pair = (tokens(&a.src), tokens(&a.tgt));
    if pair.0.is_empty() || pair.1.is_empty() {
        return Err(Error::invalid("source and target must each have at least one token"));
    }
    ensure_dir(&a.out_dir)?;
    dump_attention(&ck.params()?, &ck.model, &sv, &tv, &pair, &a.out_dir.join("attention.json"))?;
    Ok(Outcome {
        out_dir: a.out_dir.clone(),
        config: json!({
            "checkpoint": a.checkpoint,
            "checkpoint_sha256": sha256_file(&a.checkpoint)?,
            "src": a.src,
            "tgt": a.tgt,
        }),
        seed: Some(ck.seed),
        artifacts: vec!["attention.json"],
    })
}

fn simulate_cmd(a: &SimulateArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| Error::Parse {
            path: p.clone(),
            msg: e.to_string(),
        })?,
        None => SimConfig::new(64, 0.05, 100_000, 0),
    };
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.sigma0 {
        cfg.sigma0 = v;
    }
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.normalize {
        cfg.normalize = true;
    }
    if let Some(std) = a.gamma_std {
        cfg.gamma = GammaMode::Sampled { std };
    }
    cfg.validate()?;
    let report = simulate_robustness(&cfg)?;
    ensure_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("theory_report.json"), &report)?;
    let mut artifacts = vec!["theory_report.json"];
    if a.csv {
        let path = a.out_dir.join("per_trial.csv");
        fs::write(&path, report.per_trial_csv()).map_err(|e| Error::io(&path, e))?;
        artifacts.push("per_trial.csv");
    }
    println!(
        "mse_vanilla {:.6e} mse_linked {:.6e} ratio {}",
        report.mse_vanilla,
        report.mse_linked,
        report.ratio.map_or("undefined".into(), |r| format!("{r:.4}"))
    );
    Ok(Outcome {
        out_dir: a.out_dir.clone(),
        config: serde_json::to_value(&cfg)?,
        seed: Some(cfg.seed),
        artifacts,
    })
}

fn lemma1_cmd(a: &Lemma1Args) -> Result<Outcome> {
    let cfg: ModelConfig = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| Error::Parse {
            path: p.clone(),
            msg: e.to_string(),
        })?,
        None => ModelConfig::toy(a.d, a.heads, a.layers, a.vocab).with_placement(a.placement),
    };
    let report = lemma1_witness(&cfg, a.seed, a.n_inputs)?;
    ensure_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("lemma1.json"), &report)?;
    println!(
        "lambda=0: {:e}  zeroed link: {:e}  lambda=1: {:e}",
        report.lambda0_max_diff, report.zero_override_max_diff, report.lambda1_max_diff
    );
    let outcome = Outcome {
        out_dir: a.out_dir.clone(),
        config: json!({"model": cfg, "seed": a.seed, "n_inputs": a.n_inputs}),
        seed: Some(a.seed),
        artifacts: vec!["lemma1.json"],
    };
    if report.lambda0_max_diff > 1e-12 || report.zero_override_max_diff > 1e-12 {
        write_manifest("lemma1-check", &outcome)?;
        return Err(Error::CheckFailed("λ = 0 output differs from the plain model by more than 1e-12".into()));
    }
    Ok(outcome)
}

/// Runs one command line; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
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
    let (name, result) = match &cli.command {
        Command::GenData(a) => ("gen-data", gen_data(a)),
        Command::Train(a) => ("train", train_cmd(a)),
        Command::Evaluate(a) => ("evaluate", evaluate_cmd(a)),
        Command::DumpAttention(a) => ("dump-attention", dump_cmd(a)),
        Command::SimulateTheory(a) => ("simulate-theory", simulate_cmd(a)),
        Command::Lemma1Check(a) => ("lemma1-check", lemma1_cmd(a)),
    };
    match result.and_then(|o| write_manifest(name, &o)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flat_config_round_trip() {
        let mut m = flat(serde_json::to_value(ModelConfig::toy(8, 2, 1, 10)).unwrap());
        m.insert("train_tsv".into(), json!("t.tsv"));
        m.insert("base_lr".into(), json!(0.01));
        let run = RunConfig::from_flat(&m, None).unwrap();
        assert_eq!(run.train.base_lr, 0.01);
        assert_eq!(RunConfig::from_flat(&run.to_flat(), None).unwrap(), run);
    }

    #[test]
    fn unknown_and_bad_keys_are_all_reported() {
        let mut m = flat(serde_json::to_value(ModelConfig::toy(8, 2, 1, 10)).unwrap());
        m.insert("train_tsv".into(), json!("t.tsv"));
        m.insert("colour".into(), json!("red"));
        m.insert("heads".into(), json!(3));
        m.insert("warmup_steps".into(), json!(0));
        match RunConfig::from_flat(&m, None) {
            Err(Error::Config(p)) => {
                let all = p.join("\n");
                assert!(all.contains("colour"), "{all}");
                assert!(all.contains("warmup_steps"), "{all}");
                assert!(all.contains("heads"), "{all}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vocab_sizes_fill_in() {
        let mut m = flat(serde_json::to_value(ModelConfig::toy(8, 2, 1, 10)).unwrap());
        m.remove("src_vocab");
        m.remove("tgt_vocab");
        m.insert("train_tsv".into(), json!("t.tsv"));
        let run = RunConfig::from_flat(&m, Some((17, 19))).unwrap();
        assert_eq!((run.model.src_vocab, run.model.tgt_vocab), (17, 19));
    }

    #[test]
    fn overrides_parse_json_then_string() {
        assert_eq!(parse_override("seed=7").unwrap(), ("seed".into(), json!(7)));
        assert_eq!(
            parse_override("link_placement=both").unwrap(),
            ("link_placement".into(), json!("both"))
        );
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["attnlink", "frobnicate"]), 1);
        assert_eq!(dispatch(["attnlink", "train", "--bogus"]), 1);
        assert_eq!(dispatch(["attnlink", "--help"]), 0);
    }
}
