//! Loss, optimizer, learning-rate schedule and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::data::{Corpus, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{forward, pad_batch, Pass};
use crate::params::ModelParams;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Upper bound on `batch_size * longest_sequence` per batch.
    pub max_tokens: usize,
    pub max_epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            max_tokens: 4096,
            max_epochs: 10,
            max_steps: None,
            seed: 1,
            clip_norm: Some(1.0),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            problems.push(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.warmup_steps == 0 {
            problems.push("warmup_steps must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} {b} not in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            problems.push(format!("eps {} must be positive", self.eps));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            problems.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            problems.push(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if self.max_tokens == 0 {
            problems.push("max_tokens must be positive".into());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                problems.push(format!("clip_norm {c} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Linear warmup to `base_lr` at `warmup_steps`, then `1/sqrt(step)` decay.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning-rate steps are counted from 1"));
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    Ok(cfg.base_lr * (s.powf(-0.5)).min(s * w.powf(-1.5)) * w.sqrt())
}

/// Mean label-smoothed cross-entropy over non-pad positions; `logits` is
/// `[n, V]` with one row per target position.
pub fn label_smoothed_xent<'g>(
    logits: Var<'g>,
    targets: &[usize],
    pad_id: usize,
    smoothing: f64,
) -> Result<Var<'g>> {
    logits.label_smoothed_xent(targets, pad_id, smoothing)
}

/// First and second moments, laid out like the model, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One parameter's view for an Adam update.
pub struct AdamSlot<'a> {
    pub param: &'a mut [f64],
    pub grad: &'a [f64],
    pub m: &'a mut [f64],
    pub v: &'a mut [f64],
}

/// Decoupled weight decay, then a bias-corrected Adam step at count `t`.
pub fn adam_update_slot(slot: AdamSlot<'_>, cfg: &TrainConfig, lr: f64, t: u64) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..slot.param.len() {
        let g = slot.grad[i];
        slot.param[i] *= decay;
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = slot.m[i] / c1;
        let vhat = slot.v[i] / c2;
        slot.param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Advances `state.step` and applies one update at learning rate `lr`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.named() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step;
    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        adam_update_slot(
            AdamSlot {
                param: p.data_mut(),
                grad: g.data(),
                m: m.data_mut(),
                v: v.data_mut(),
            },
            cfg,
            lr,
            t,
        );
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A pair in model ids: `src` ends with `EOS`, `tgt_in` starts with `BOS`,
/// `tgt_out` is `tgt_in` shifted left with a trailing `EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

pub fn source_ids(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    let mut ids = vocab.encode(tokens);
    ids.push(EOS);
    ids
}

pub fn prepare(corpus: &Corpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<Example> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| {
            let tgt = tgt_vocab.encode(t);
            let mut tgt_in = vec![BOS];
            tgt_in.extend_from_slice(&tgt);
            let mut tgt_out = tgt;
            tgt_out.push(EOS);
            Example {
                src: source_ids(s, src_vocab),
                tgt_in,
                tgt_out,
            }
        })
        .collect()
}

fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Shuffles, buckets by length, packs batches up to `max_tokens` padded
/// tokens, then shuffles batch order. Every example lands in one batch.
pub fn make_batches(examples: &[Example], max_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    fisher_yates(&mut idx, rng);
    let width = |i: usize| examples[i].src.len().max(examples[i].tgt_in.len());
    idx.sort_by_key(|&i| width(i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in idx {
        let w = width(i).max(longest);
        if !current.is_empty() && (current.len() + 1) * w > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(width(i));
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    fisher_yates(&mut batches, rng);
    batches
}

/// Argmax (lowest id on ties) matches over non-pad targets.
pub fn count_correct(logits: &Tensor, targets: &[usize]) -> (usize, usize) {
    let v = *logits.shape().last().unwrap();
    let mut correct = 0;
    let mut total = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if argmax(logits.row(r)) == t {
            correct += 1;
        }
        debug_assert_eq!(logits.row(r).len(), v);
    }
    (correct, total)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Loss and accuracy counts for a batch, without gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub tokens: usize,
}

fn batch_ids(examples: &[Example], batch: &[usize]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<usize>) {
    let src: Vec<Vec<usize>> = batch.iter().map(|&i| examples[i].src.clone()).collect();
    let tgt_in: Vec<Vec<usize>> = batch.iter().map(|&i| examples[i].tgt_in.clone()).collect();
    let tgt_out: Vec<Vec<usize>> = batch.iter().map(|&i| examples[i].tgt_out.clone()).collect();
    let (flat_out, _, _) = pad_batch(&tgt_out).expect("targets are never empty");
    (src, tgt_in, flat_out)
}

/// Builds the graph for one batch and returns the loss node.
pub fn batch_loss<'g>(
    p: &crate::params::Params<Var<'g>>,
    cfg: &ModelConfig,
    examples: &[Example],
    batch: &[usize],
    smoothing: f64,
    pass: &mut Pass<'_>,
) -> Result<(Var<'g>, BatchStats)> {
    let (src, tgt_in, targets) = batch_ids(examples, batch);
    let out = forward(p, cfg, &src, &tgt_in, pass)?;
    let loss = label_smoothed_xent(out.logits, &targets, PAD, smoothing)?;
    let (correct, tokens) = count_correct(&out.logits.value(), &targets);
    Ok((
        loss,
        BatchStats {
            loss: loss.value().item(),
            correct,
            tokens,
        },
    ))
}

/// Teacher-forced loss and token accuracy in eval mode.
pub fn evaluate_examples(
    params: &ModelParams,
    cfg: &ModelConfig,
    examples: &[Example],
    smoothing: f64,
    max_tokens: usize,
) -> Result<BatchStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = BatchStats::default();
    let mut loss_sum = 0.0;
    for batch in make_batches(examples, max_tokens, &mut rng) {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let (_, s) = batch_loss(&p, cfg, examples, &batch, smoothing, &mut Pass::eval())?;
        loss_sum += s.loss * s.tokens as f64;
        total.correct += s.correct;
        total.tokens += s.tokens;
    }
    total.loss = loss_sum / total.tokens as f64;
    Ok(total)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Token-weighted mean training loss over the epoch.
    pub loss: f64,
    pub token_accuracy: f64,
    /// Learning rate used for the epoch's last step.
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_token_accuracy: Option<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub valid: Option<&'a Corpus>,
    /// Where `metrics.jsonl` and `checkpoint.json` go.
    pub out_dir: Option<&'a Path>,
    /// Start from these parameters instead of a fresh init.
    pub init: Option<ModelParams>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

/// Teacher-forced training. Fully determined by the configs, the corpus
/// and the vocabularies.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`]; the parameters from before the failing step are
/// written to `checkpoint.last_good.json` when an output directory is set.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    corpus: &Corpus,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let examples = prepare(corpus, src_vocab, tgt_vocab);
    let valid = opts.valid.map(|c| prepare(c, src_vocab, tgt_vocab));
    let mut params = match opts.init {
        Some(p) => {
            p.check_shapes(model_cfg)?;
            p
        }
        None => ModelParams::init(model_cfg, train_cfg.seed)?,
    };
    let mut adam = AdamState::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    dropout_rng.set_stream(2);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    batch_rng.set_stream(3);

    let metrics_path = opts.out_dir.map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = metrics_path.as_ref().unwrap();
        fs::write(path, "").map_err(|e| Error::io(path, e))?;
    }

    let snapshot = |params: &ModelParams, adam: &AdamState| {
        Checkpoint::new(
            model_cfg,
            Some(train_cfg),
            train_cfg.seed,
            params,
            Some(adam),
            src_vocab,
            tgt_vocab,
        )
    };

    let mut metrics = Vec::new();
    let mut lr = 0.0;
    'epochs: for epoch in 1..=train_cfg.max_epochs {
        let batches = make_batches(&examples, train_cfg.max_tokens, &mut batch_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut tokens = 0;
        for batch in &batches {
            if train_cfg.max_steps.is_some_and(|m| adam.step >= m) {
                break 'epochs;
            }
            let step = adam.step + 1;
            lr = lr_at_step(step, train_cfg)?;
            let g = Graph::new();
            let p = params.bind(&g);
            let (loss, stats) = batch_loss(
                &p,
                model_cfg,
                &examples,
                batch,
                train_cfg.label_smoothing,
                &mut Pass::train(&mut dropout_rng),
            )?;
            let mut grads = if stats.loss.is_finite() {
                g.backward(loss)?;
                p.grads()
            } else {
                params.zeros_like()
            };
            let diverged = !stats.loss.is_finite() || grads.named().iter().any(|(_, t)| !t.is_finite());
            if diverged {
                if let Some(dir) = opts.out_dir {
                    snapshot(&params, &adam).save(&dir.join("checkpoint.last_good.json"))?;
                }
                return Err(Error::Diverged {
                    step,
                    loss: stats.loss,
                });
            }
            if let Some(c) = train_cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam, train_cfg, lr)?;
            loss_sum += stats.loss * stats.tokens as f64;
            correct += stats.correct;
            tokens += stats.tokens;
        }
        if tokens == 0 {
            break;
        }
        let mut m = EpochMetrics {
            epoch,
            step: adam.step,
            loss: loss_sum / tokens as f64,
            token_accuracy: correct as f64 / tokens as f64,
            lr,
            valid_loss: None,
            valid_token_accuracy: None,
        };
        if let Some(v) = &valid {
            let s = evaluate_examples(&params, model_cfg, v, train_cfg.label_smoothing, train_cfg.max_tokens)?;
            m.valid_loss = Some(s.loss);
            m.valid_token_accuracy = Some(s.correct as f64 / s.tokens as f64);
        }
        if opts.verbose {
            eprintln!("{}", serde_json::to_string(&m)?);
        }
        if let Some(path) = &metrics_path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(path, e))?;
        }
        metrics.push(m);
        if let Some(dir) = opts.out_dir {
            if train_cfg.checkpoint_every > 0 && epoch % train_cfg.checkpoint_every == 0 {
                snapshot(&params, &adam).save(&dir.join(format!("checkpoint.epoch{epoch}.json")))?;
            }
        }
    }

    let checkpoint = snapshot(&params, &adam);
    if let Some(dir) = opts.out_dir {
        checkpoint.save(&dir.join("checkpoint.json"))?;
    }
    Ok(TrainOutcome {
        params,
        adam,
        metrics,
        checkpoint,
    })
}
