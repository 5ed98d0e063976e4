//! Monte Carlo model of one attention layer under noisy attention weights,
//! with and without averaging against the previous layer, and the λ = 0
//! equivalence witness for whole models.
//!
//! The simulator works on scalar sequences of length `N`:
//! `y(j) = Σ_i x(i) P(i, j)` with `Σ_i P(i, j) = 1`. The vanilla estimate
//! perturbs `P` by i.i.d. `N(0, σ0²)` noise; the linked estimate averages
//! two independently perturbed matrices, `P` and `P_pre`, with weight ½.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LinkPlacement, ModelConfig};
use crate::data::RESERVED;
use crate::error::{Error, Result};
use crate::model::{forward, Pass};
use crate::params::ModelParams;
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum GammaMode {
    /// `P_pre = P`.
    Zero,
    /// `P_pre` is the softmax of `P`'s logits plus `N(0, std²)` noise.
    Sampled { std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub sigma0: f64,
    pub trials: usize,
    pub seed: u64,
    /// Divide each output by the column sum of the perturbed weights
    /// instead of taking it as 1.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "gamma_zero")]
    pub gamma: GammaMode,
}

fn gamma_zero() -> GammaMode {
    GammaMode::Zero
}

impl SimConfig {
    pub fn new(n: usize, sigma0: f64, trials: usize, seed: u64) -> Self {
        Self {
            n,
            sigma0,
            trials,
            seed,
            normalize: false,
            gamma: GammaMode::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n == 0 {
            problems.push("N must be at least 1".to_string());
        }
        if !(self.sigma0.is_finite() && self.sigma0 >= 0.0) {
            problems.push(format!("sigma0 {} must be finite and non-negative", self.sigma0));
        }
        if self.trials == 0 {
            problems.push("trials must be at least 1".into());
        }
        if let GammaMode::Sampled { std } = self.gamma {
            if !(std.is_finite() && std >= 0.0) {
                problems.push(format!("gamma std {std} must be finite and non-negative"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Per-trial quantities; every field is a mean over output positions `j`
/// except the bounds and the noise estimates, which follow their formulas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub mse_vanilla: f64,
    pub mse_linked: f64,
    pub mean_abs_vanilla: f64,
    pub mean_abs_linked: f64,
    /// `(1/2N) ΣΣ x² + (1/N) ΣΣ σ²`.
    pub eq10_bound: f64,
    /// `(1/2N) ΣΣ x² + (1/N) ΣΣ (σ/2 + σ_pre/2)²`.
    pub eq15_bound: f64,
    /// `(1/N) ΣΣ σ²`.
    pub eq16_estimate: f64,
    /// `(1/N) ΣΣ (σ/2 + σ_pre/2)²`.
    pub eq17_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config: SimConfig,
    pub mse_vanilla: f64,
    pub mse_linked: f64,
    /// `mse_linked / mse_vanilla`; absent when `mse_vanilla` is 0.
    pub ratio: Option<f64>,
    pub mean_abs_vanilla: f64,
    pub mean_abs_linked: f64,
    pub eq10_bound: f64,
    pub eq15_bound: f64,
    pub eq16_estimate: f64,
    pub eq17_estimate: f64,
    /// `N σ0²` and `N σ0² / 2`, for comparison with the estimates.
    pub eq16_expected: f64,
    pub eq17_expected: f64,
    /// Trials whose mean absolute error exceeded the matching bound.
    pub eq10_violations: usize,
    pub eq15_violations: usize,
    #[serde(skip)]
    pub per_trial: Vec<TrialStats>,
}

impl RobustnessReport {
    /// Per-trial errors, one row per trial.
    pub fn per_trial_csv(&self) -> String {
        let mut out = String::from(
            "trial,mse_vanilla,mse_linked,mean_abs_vanilla,mean_abs_linked,eq10_bound,eq15_bound,eq16_estimate,eq17_estimate\n",
        );
        for (t, s) in self.per_trial.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{},{},{}",
                s.mse_vanilla,
                s.mse_linked,
                s.mean_abs_vanilla,
                s.mean_abs_linked,
                s.eq10_bound,
                s.eq15_bound,
                s.eq16_estimate,
                s.eq17_estimate
            );
        }
        out
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// In-place softmax.
fn softmax(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in v.iter_mut() {
        *e /= sum;
    }
}

/// Generator for one trial: ChaCha8 stream `trial` of `seed` supplies the
/// state of a faster generator used for the bulk draws.
pub fn trial_rng(seed: u64, trial: u64) -> Xoshiro256PlusPlus {
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    root.set_stream(trial);
    Xoshiro256PlusPlus::from_rng(&mut root)
}

/// One trial, drawn from its own stream so trials can run in any order.
/// Columns `j` are drawn one after another: logits (and their `P_pre`
/// perturbation), then `σ(·, j)`, then `σ_pre(·, j)`.
pub fn simulate_trial(cfg: &SimConfig, trial: u64) -> TrialStats {
    let n = cfg.n;
    let mut rng = trial_rng(cfg.seed, trial);
    let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let mut p = vec![0.0; n];
    let mut p_pre = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut sigma_pre = vec![0.0; n];
    let s0 = cfg.sigma0;

    let mut st = TrialStats::default();
    let mut sum_sigma2 = 0.0;
    let mut sum_avg2 = 0.0;
    for _j in 0..n {
        p.iter_mut().for_each(|v| *v = normal(&mut rng));
        match cfg.gamma {
            GammaMode::Zero => {
                softmax(&mut p);
                p_pre.copy_from_slice(&p);
            }
            GammaMode::Sampled { std } => {
                for (q, &l) in p_pre.iter_mut().zip(&p) {
                    *q = l + std * normal(&mut rng);
                }
                softmax(&mut p);
                softmax(&mut p_pre);
            }
        }
        sigma.iter_mut().for_each(|v| *v = s0 * normal(&mut rng));
        sigma_pre.iter_mut().for_each(|v| *v = s0 * normal(&mut rng));

        let (mut y, mut yv, mut yl) = (0.0, 0.0, 0.0);
        let (mut cv, mut cl) = (0.0, 0.0);
        for i in 0..n {
            let wv = p[i] + sigma[i];
            let wl = 0.5 * p[i] + 0.5 * p_pre[i] + 0.5 * sigma[i] + 0.5 * sigma_pre[i];
            y += x[i] * p[i];
            yv += x[i] * wv;
            yl += x[i] * wl;
            cv += wv;
            cl += wl;
            sum_sigma2 += sigma[i] * sigma[i];
            let avg = 0.5 * sigma[i] + 0.5 * sigma_pre[i];
            sum_avg2 += avg * avg;
        }
        if cfg.normalize {
            yv /= cv;
            yl /= cl;
        }
        let (dv, dl) = (y - yv, y - yl);
        st.mse_vanilla += dv * dv;
        st.mse_linked += dl * dl;
        st.mean_abs_vanilla += dv.abs();
        st.mean_abs_linked += dl.abs();
    }
    let nf = n as f64;
    st.mse_vanilla /= nf;
    st.mse_linked /= nf;
    st.mean_abs_vanilla /= nf;
    st.mean_abs_linked /= nf;
    // (1/2N) Σ_i Σ_j x(i)², the sum over j contributing a factor N.
    let x_term = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
    st.eq16_estimate = sum_sigma2 / nf;
    st.eq17_estimate = sum_avg2 / nf;
    st.eq10_bound = x_term + st.eq16_estimate;
    st.eq15_bound = x_term + st.eq17_estimate;
    st
}

/// Runs all trials (in parallel) and averages in trial order, so the
/// report does not depend on the thread count.
pub fn simulate_robustness(cfg: &SimConfig) -> Result<RobustnessReport> {
    cfg.validate()?;
    let per_trial: Vec<TrialStats> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| simulate_trial(cfg, t))
        .collect();
    let tn = cfg.trials as f64;
    let mean = |f: fn(&TrialStats) -> f64| per_trial.iter().map(f).sum::<f64>() / tn;
    let mse_vanilla = mean(|s| s.mse_vanilla);
    let mse_linked = mean(|s| s.mse_linked);
    let nf = cfg.n as f64;
    let s2 = cfg.sigma0 * cfg.sigma0;
    Ok(RobustnessReport {
        config: cfg.clone(),
        mse_vanilla,
        mse_linked,
        ratio: (mse_vanilla > 0.0).then(|| mse_linked / mse_vanilla),
        mean_abs_vanilla: mean(|s| s.mean_abs_vanilla),
        mean_abs_linked: mean(|s| s.mean_abs_linked),
        eq10_bound: mean(|s| s.eq10_bound),
        eq15_bound: mean(|s| s.eq15_bound),
        eq16_estimate: mean(|s| s.eq16_estimate),
        eq17_estimate: mean(|s| s.eq17_estimate),
        eq16_expected: nf * s2,
        eq17_expected: 0.5 * nf * s2,
        eq10_violations: per_trial.iter().filter(|s| s.mean_abs_vanilla > s.eq10_bound).count(),
        eq15_violations: per_trial.iter().filter(|s| s.mean_abs_linked > s.eq15_bound).count(),
        per_trial,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub config: ModelConfig,
    pub seed: u64,
    pub n_inputs: usize,
    /// Linked model at λ = 0 against the plain model, same parameters.
    pub lambda0_max_diff: f64,
    /// Linked model at λ = 1 with every link term replaced by zeros.
    pub zero_override_max_diff: f64,
    /// Linked model at λ = 1, unmodified.
    pub lambda1_max_diff: f64,
}

/// Random source/target id sequences within the config's limits.
pub fn random_inputs(cfg: &ModelConfig, seed: u64, n_inputs: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let longest = cfg.max_len.min(12);
    let seq = |vocab: usize, rng: &mut ChaCha8Rng| {
        let len = rng.random_range(1..=longest);
        (0..len).map(|_| rng.random_range(RESERVED.len()..vocab)).collect::<Vec<_>>()
    };
    let src = (0..n_inputs).map(|_| seq(cfg.src_vocab, &mut rng)).collect();
    let tgt = (0..n_inputs).map(|_| seq(cfg.tgt_vocab, &mut rng)).collect();
    (src, tgt)
}

fn logits_of(params: &ModelParams, cfg: &ModelConfig, src: &[Vec<usize>], tgt: &[Vec<usize>], zero_link: bool) -> Result<Vec<f64>> {
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let mut pass = if zero_link { Pass::eval().with_zero_link() } else { Pass::eval() };
    let f = forward(&p, cfg, src, tgt, &mut pass)?;
    let v = f.logits.value();
    Ok(v.data().to_vec())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Parameters drawn once from `seed`; the plain model is `cfg` with no
/// links, the linked model is `cfg` with its own placement and source.
pub fn lemma1_witness(cfg: &ModelConfig, seed: u64, n_inputs: usize) -> Result<Lemma1Report> {
    cfg.validate()?;
    if n_inputs == 0 {
        return Err(Error::invalid("n_inputs must be at least 1"));
    }
    let plain = cfg.clone().with_placement(LinkPlacement::None);
    let linked0 = cfg.clone().with_link_scale(0.0);
    let linked1 = cfg.clone().with_link_scale(1.0);
    let params = ModelParams::init(&plain, seed)?;
    let (src, tgt) = random_inputs(cfg, seed, n_inputs);
    let base = logits_of(&params, &plain, &src, &tgt, false)?;
    Ok(Lemma1Report {
        config: cfg.clone(),
        seed,
        n_inputs,
        lambda0_max_diff: max_abs_diff(&base, &logits_of(&params, &linked0, &src, &tgt, false)?),
        zero_override_max_diff: max_abs_diff(&base, &logits_of(&params, &linked1, &src, &tgt, true)?),
        lambda1_max_diff: max_abs_diff(&base, &logits_of(&params, &linked1, &src, &tgt, false)?),
    })
}
