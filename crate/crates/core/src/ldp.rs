//! Local differential privacy at the token-index level.
//!
//! Every mechanism consumes the same number of random draws for a given
//! `(mechanism, k, dbit_d)` regardless of `epsilon`, and each draw enters
//! monotonically. Runs that share a seed but differ in `epsilon` are therefore
//! coupled: a token kept at a small budget is also kept at a larger one.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenBatch, Vocabulary};
use crate::error::{AmiError, Result};

pub const DEFAULT_THE_THETA: f64 = 0.67;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    None,
    Grr,
    Rappor,
    The,
    #[serde(rename = "dbitflippm")]
    DBitFlipPm,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Grr, Mechanism::Rappor, Mechanism::The, Mechanism::DBitFlipPm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Grr => "grr",
            Mechanism::Rappor => "rappor",
            Mechanism::The => "the",
            Mechanism::DBitFlipPm => "dbitflippm",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = AmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Mechanism::None),
            "grr" => Ok(Mechanism::Grr),
            "rappor" => Ok(Mechanism::Rappor),
            "the" => Ok(Mechanism::The),
            "dbitflippm" | "dbitflip" => Ok(Mechanism::DBitFlipPm),
            other => Err(AmiError::Config(format!("unknown DP mechanism `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub k: usize,
    pub the_theta: f64,
    pub dbit_d: usize,
    /// Spread `epsilon` over the tokens of a sequence instead of spending it per token.
    pub split_budget: bool,
}

impl DpConfig {
    pub fn none() -> Self {
        DpConfig {
            mechanism: Mechanism::None,
            epsilon: f64::INFINITY,
            k: 1,
            the_theta: DEFAULT_THE_THETA,
            dbit_d: 1,
            split_budget: false,
        }
    }

    /// Defaults: THE threshold 0.67, `dbit_d = min(k, 8)`, full budget per token.
    pub fn new(mechanism: Mechanism, epsilon: f64, k: usize) -> Self {
        DpConfig {
            mechanism,
            epsilon,
            k,
            the_theta: DEFAULT_THE_THETA,
            dbit_d: k.clamp(1, 8),
            split_budget: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanism == Mechanism::None {
            return Ok(());
        }
        if !(self.epsilon > 0.0) || self.epsilon.is_nan() {
            return Err(AmiError::Config(format!("dp.epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.k == 0 {
            return Err(AmiError::Config("dp.k must be >= 1".into()));
        }
        if !(self.the_theta > 0.0 && self.the_theta < 1.0) {
            return Err(AmiError::Config(format!("dp.the_theta must lie in (0, 1), got {}", self.the_theta)));
        }
        if self.dbit_d < 1 || self.dbit_d > self.k {
            return Err(AmiError::Config(format!(
                "dp.dbit_d must lie in [1, k = {}], got {}",
                self.k, self.dbit_d
            )));
        }
        Ok(())
    }

    /// Copy with the per-token budget for sequences of `l_x` tokens.
    pub fn per_token(&self, l_x: usize) -> DpConfig {
        let mut c = self.clone();
        if self.split_budget && l_x > 0 {
            c.epsilon = self.epsilon / l_x as f64;
        }
        c
    }

    fn check_index(&self, index: u32) -> Result<usize> {
        let i = index as usize;
        if i >= self.k {
            return Err(AmiError::Domain { index, k: self.k });
        }
        Ok(i)
    }
}

/// GRR probability of reporting the true value, `e^eps / (e^eps + k - 1)`.
pub fn grr_keep_probability(epsilon: f64, k: usize) -> f64 {
    1.0 / (1.0 + (k as f64 - 1.0) * (-epsilon).exp())
}

/// Probability that a unary-encoded bit is reported truthfully, `e^(eps/2) / (e^(eps/2) + 1)`.
pub fn bit_keep_probability(epsilon: f64) -> f64 {
    1.0 / (1.0 + (-epsilon / 2.0).exp())
}

pub fn the_noise_scale(epsilon: f64) -> f64 {
    2.0 / epsilon
}

pub fn laplace_cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale).exp()
    } else {
        1.0 - 0.5 * (-x / scale).exp()
    }
}

/// Standard Laplace draw by inverse CDF from `u` uniform in `[0, 1)`; increasing in `u`.
fn std_laplace(u: f64) -> f64 {
    let c = u - 0.5;
    if c < 0.0 {
        (1.0 + 2.0 * c).max(f64::MIN_POSITIVE).ln()
    } else {
        -(1.0 - 2.0 * c).max(f64::MIN_POSITIVE).ln()
    }
}

/// Probability that the true THE bucket clears the threshold.
pub fn the_true_exceed(epsilon: f64, theta: f64) -> f64 {
    1.0 - laplace_cdf(theta - 1.0, the_noise_scale(epsilon))
}

/// Probability that an empty THE bucket clears the threshold.
pub fn the_false_exceed(epsilon: f64, theta: f64) -> f64 {
    1.0 - laplace_cdf(theta, the_noise_scale(epsilon))
}

fn pick_uniform(u: f64, len: usize) -> usize {
    ((u * len as f64) as usize).min(len - 1)
}

pub fn perturb_grr<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<u32> {
    let i = cfg.check_index(index)?;
    let u: f64 = rng.random();
    if cfg.k == 1 {
        return Ok(index);
    }
    let r = rng.random_range(0..cfg.k - 1);
    if u < grr_keep_probability(cfg.epsilon, cfg.k) {
        Ok(index)
    } else {
        Ok(if r < i { r } else { r + 1 } as u32)
    }
}

/// Unary encoding with independent bit flips.
pub fn rappor_encode<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<Vec<bool>> {
    let i = cfg.check_index(index)?;
    let q = bit_keep_probability(cfg.epsilon);
    Ok((0..cfg.k)
        .map(|j| {
            let u: f64 = rng.random();
            (j == i) == (u < q)
        })
        .collect())
}

/// Reported THE set: buckets whose noisy one-hot value exceeds the threshold.
pub fn the_encode<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<Vec<bool>> {
    let i = cfg.check_index(index)?;
    let scale = the_noise_scale(cfg.epsilon);
    Ok((0..cfg.k)
        .map(|j| {
            let base = if j == i { 1.0 } else { 0.0 };
            base + scale * std_laplace(rng.random()) > cfg.the_theta
        })
        .collect())
}

/// Sampled buckets (the true one first) with their randomized membership bits.
pub fn dbitflip_encode<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<Vec<(u32, bool)>> {
    let i = cfg.check_index(index)?;
    let q = bit_keep_probability(cfg.epsilon);
    let mut buckets = vec![i];
    if cfg.dbit_d > 1 {
        for r in index::sample(rng, cfg.k - 1, cfg.dbit_d - 1).into_iter() {
            buckets.push(if r < i { r } else { r + 1 });
        }
    }
    Ok(buckets
        .into_iter()
        .map(|j| {
            let u: f64 = rng.random();
            (j as u32, (j == i) == (u < q))
        })
        .collect())
}

fn decode_positive<R: Rng + ?Sized>(positives: &[u32], k: usize, rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    if positives.is_empty() {
        pick_uniform(u, k) as u32
    } else {
        positives[pick_uniform(u, positives.len())]
    }
}

fn set_bits(bits: &[bool]) -> Vec<u32> {
    bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j as u32).collect()
}

pub fn perturb_rappor<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<u32> {
    let bits = rappor_encode(index, cfg, rng)?;
    Ok(decode_positive(&set_bits(&bits), cfg.k, rng))
}

pub fn perturb_the<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<u32> {
    let bits = the_encode(index, cfg, rng)?;
    Ok(decode_positive(&set_bits(&bits), cfg.k, rng))
}

pub fn perturb_dbitflip<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<u32> {
    let reports = dbitflip_encode(index, cfg, rng)?;
    let mut pos: Vec<u32> = reports.iter().filter(|(_, b)| *b).map(|(j, _)| *j).collect();
    pos.sort_unstable();
    Ok(decode_positive(&pos, cfg.k, rng))
}

pub fn perturb_index<R: Rng + ?Sized>(index: u32, cfg: &DpConfig, rng: &mut R) -> Result<u32> {
    match cfg.mechanism {
        Mechanism::None => Ok(index),
        Mechanism::Grr => perturb_grr(index, cfg, rng),
        Mechanism::Rappor => perturb_rappor(index, cfg, rng),
        Mechanism::The => perturb_the(index, cfg, rng),
        Mechanism::DBitFlipPm => perturb_dbitflip(index, cfg, rng),
    }
}

/// Perturbs a flat id list made of sequences of `l_x` tokens.
pub fn perturb_ids<R: Rng + ?Sized>(ids: &[u32], l_x: usize, cfg: &DpConfig, rng: &mut R) -> Result<Vec<u32>> {
    let c = cfg.per_token(l_x);
    ids.iter().map(|&id| perturb_index(id, &c, rng)).collect()
}

/// Perturbs every token id of `batch` and re-embeds through `vocab`.
pub fn perturb_batch<R: Rng + ?Sized>(
    batch: &TokenBatch,
    vocab: Option<&Vocabulary>,
    cfg: &DpConfig,
    rng: &mut R,
) -> Result<TokenBatch> {
    if cfg.mechanism == Mechanism::None {
        return Ok(batch.clone());
    }
    let vocab = vocab.ok_or_else(|| AmiError::Config("index-level DP needs a vocabulary".into()))?;
    let ids = batch
        .token_ids()
        .ok_or_else(|| AmiError::Config("index-level DP needs token ids on the batch".into()))?;
    if vocab.k() != cfg.k {
        return Err(AmiError::Config(format!("dp.k = {} but the vocabulary has {} entries", cfg.k, vocab.k())));
    }
    let noisy = perturb_ids(ids, batch.l_x(), cfg, rng)?;
    let values = vocab.lookup(&noisy)?;
    TokenBatch::new(values, batch.n(), batch.l_x(), batch.d_x(), batch.source())?.with_token_ids(noisy)
}

/// `E[1 / (1 + K)]` for `K ~ Binomial(m, f)`.
fn mean_inv_one_plus(m: usize, f: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    let m1 = (m + 1) as f64;
    -(m1 * (-f).ln_1p()).exp_m1() / (m1 * f)
}

/// Exact probability that the decoded index equals the input.
pub fn keep_probability(cfg: &DpConfig) -> f64 {
    let k = cfg.k;
    // true bucket reported w.p. a, each of m other candidates w.p. f
    let (a, f, m) = match cfg.mechanism {
        Mechanism::None => return 1.0,
        Mechanism::Grr => return grr_keep_probability(cfg.epsilon, k),
        Mechanism::Rappor => {
            let q = bit_keep_probability(cfg.epsilon);
            (q, 1.0 - q, k - 1)
        }
        Mechanism::The => (
            the_true_exceed(cfg.epsilon, cfg.the_theta),
            the_false_exceed(cfg.epsilon, cfg.the_theta),
            k - 1,
        ),
        Mechanism::DBitFlipPm => {
            let q = bit_keep_probability(cfg.epsilon);
            (q, 1.0 - q, cfg.dbit_d - 1)
        }
    };
    let none_reported = (m as f64 * (-f).ln_1p()).exp();
    a * mean_inv_one_plus(m, f) + (1.0 - a) * none_reported / k as f64
}

/// One statistic of a mechanism self-test.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub mechanism: Mechanism,
    pub statistic: &'static str,
    pub epsilon: f64,
    pub k: usize,
    pub observations: u64,
    pub empirical: f64,
    pub expected: f64,
    pub sigma: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(mechanism: Mechanism, statistic: &'static str, cfg: &DpConfig, hits: u64, obs: u64, expected: f64) -> Self {
        let empirical = hits as f64 / obs as f64;
        let sigma = (expected * (1.0 - expected) / obs as f64).max(0.0).sqrt();
        let pass = (empirical - expected).abs() <= 3.0 * sigma + 1e-12;
        CheckResult {
            mechanism,
            statistic,
            epsilon: cfg.epsilon,
            k: cfg.k,
            observations: obs,
            empirical,
            expected,
            sigma,
            pass,
        }
    }
}

/// Binomial self-tests of the configured mechanism over `trials` random inputs.
///
/// `expected_offset` shifts the analytic rates and exists only as a negative control.
pub fn self_test<R: Rng + ?Sized>(cfg: &DpConfig, trials: u64, expected_offset: f64, rng: &mut R) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let mech = cfg.mechanism;
    let k = cfg.k;
    let mut out = Vec::new();
    let mut kept = 0u64;
    match mech {
        Mechanism::None => {
            for _ in 0..trials {
                let i = rng.random_range(0..k) as u32;
                kept += (perturb_index(i, cfg, rng)? == i) as u64;
            }
        }
        Mechanism::Grr => {
            for _ in 0..trials {
                let i = rng.random_range(0..k) as u32;
                kept += (perturb_grr(i, cfg, rng)? == i) as u64;
            }
        }
        Mechanism::Rappor => {
            let mut flips = 0u64;
            for _ in 0..trials {
                let i = rng.random_range(0..k) as u32;
                let bits = rappor_encode(i, cfg, rng)?;
                flips += bits.iter().enumerate().filter(|(j, &b)| b != (*j == i as usize)).count() as u64;
                kept += (decode_positive(&set_bits(&bits), k, rng) == i) as u64;
            }
            let p = 1.0 - bit_keep_probability(cfg.epsilon) + expected_offset;
            out.push(CheckResult::new(mech, "bit_flip_rate", cfg, flips, trials * k as u64, p));
        }
        Mechanism::The => {
            let (mut true_hits, mut false_hits) = (0u64, 0u64);
            for _ in 0..trials {
                let i = rng.random_range(0..k) as u32;
                let bits = the_encode(i, cfg, rng)?;
                true_hits += bits[i as usize] as u64;
                false_hits += bits.iter().filter(|&&b| b).count() as u64 - bits[i as usize] as u64;
                kept += (decode_positive(&set_bits(&bits), k, rng) == i) as u64;
            }
            let p = the_true_exceed(cfg.epsilon, cfg.the_theta) + expected_offset;
            out.push(CheckResult::new(mech, "true_exceed_rate", cfg, true_hits, trials, p));
            if k > 1 {
                let p = the_false_exceed(cfg.epsilon, cfg.the_theta) + expected_offset;
                out.push(CheckResult::new(mech, "false_exceed_rate", cfg, false_hits, trials * (k as u64 - 1), p));
            }
        }
        Mechanism::DBitFlipPm => {
            let mut truthful = 0u64;
            for _ in 0..trials {
                let i = rng.random_range(0..k) as u32;
                let reports = dbitflip_encode(i, cfg, rng)?;
                truthful += reports.iter().filter(|(j, b)| *b == (*j == i)).count() as u64;
                let mut pos: Vec<u32> = reports.iter().filter(|(_, b)| *b).map(|(j, _)| *j).collect();
                pos.sort_unstable();
                kept += (decode_positive(&pos, k, rng) == i) as u64;
            }
            let p = bit_keep_probability(cfg.epsilon) + expected_offset;
            out.push(CheckResult::new(mech, "truthful_bit_rate", cfg, truthful, trials * cfg.dbit_d as u64, p));
        }
    }
    let p = keep_probability(cfg) + expected_offset;
    out.insert(0, CheckResult::new(mech, "keep_rate", cfg, kept, trials, p));
    Ok(out)
}
