//! Attention adversary: a filter head that ignores the target token `v`, a
//! memorization head that retrieves every token, copies of both with opposite
//! signs in `W_O`, and a cut-off `gamma` in `b_O`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{DataStats, SourceKind};
use crate::error::{AmiError, Result};
use crate::nn::linalg::{pseudo_inverse_full_rank, qr_orthonormal, Matrix};
use crate::nn::{AttnHead, AttnParams, GradientReport, Guess, HEADS};

pub const MAX_CRAFT_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnAttackConfig {
    /// Effective memorization strength seen by the softmax.
    pub beta: f64,
    pub gamma: Gamma,
    pub target_token_index: usize,
}

impl AttnAttackConfig {
    pub fn new(beta: f64) -> Self {
        AttnAttackConfig { beta, gamma: Gamma::Auto, target_token_index: 0 }
    }

    pub fn validate(&self, l_x: usize) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(AmiError::Config(format!("attack.beta must be > 0, got {}", self.beta)));
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(AmiError::Config(format!("attack.gamma must be > 0, got {g}")));
            }
        }
        if self.target_token_index >= l_x {
            return Err(AmiError::Config(format!(
                "attack.target_token_index {} out of range for l_x = {l_x}",
                self.target_token_index
            )));
        }
        Ok(())
    }
}

/// Default memorization strength per data source.
pub fn default_beta(source: SourceKind, d_x: usize) -> f64 {
    match source {
        SourceKind::OneHot | SourceKind::Spherical => 10.0,
        SourceKind::Gaussian => 10.0 / d_x as f64,
        SourceKind::EmbedFile | SourceKind::IndexFile => 2.0,
    }
}

/// Value to pass to [`craft_attn`] so that the softmax sees `beta_effective`
/// after the layer's own `1/sqrt(d_attn)` scaling.
pub fn crafting_beta(beta_effective: f64, d_x: usize) -> f64 {
    beta_effective * ((d_x - 1) as f64).sqrt()
}

/// `beta * (W_Q^+)^T`.
pub fn memorization_key(w_q: &Matrix, beta: f64) -> Option<Matrix> {
    let p = pseudo_inverse_full_rank(w_q)?;
    Some(Matrix::from_fn(w_q.nrows(), w_q.ncols(), |i, j| beta * p[(j, i)]))
}

fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for v in m.col_as_slice_mut(j) {
            *v = rng.sample(StandardNormal);
        }
    }
    m
}

fn try_craft<R: Rng + ?Sized>(v: &[f64], beta: f64, rng: &mut R) -> Option<[AttnHead; 2]> {
    let d = v.len();
    let mut w = randn(d, d, rng);
    w.col_as_slice_mut(0).copy_from_slice(v);
    let w_q2 = randn(d - 1, d, rng);
    let q = qr_orthonormal(&w).ok()?.q;
    // rows of W_Q^1 span the complement of v
    let w_q1 = Matrix::from_fn(d - 1, d, |i, j| q[(j, i + 1)]);
    let w_k1 = memorization_key(&w_q1, beta)?;
    let w_k2 = memorization_key(&w_q2, beta)?;
    let eye = Matrix::identity(d, d);
    Some([
        AttnHead { w_q: w_q1, w_k: w_k1, w_v: eye.clone() },
        AttnHead { w_q: w_q2, w_k: w_k2, w_v: eye },
    ])
}

/// Builds the adversarial attention layer for target token `v`.
pub fn craft_attn<R: Rng + ?Sized>(v: &[f64], beta: f64, gamma: f64, rng: &mut R) -> Result<AttnParams> {
    let d = v.len();
    if d < 2 {
        return Err(AmiError::Config(format!("attention crafting needs d_x >= 2, got {d}")));
    }
    if !(beta > 0.0) || !(gamma > 0.0) {
        return Err(AmiError::Config(format!("beta and gamma must be > 0, got {beta}, {gamma}")));
    }
    if v.iter().all(|&x| x == 0.0) || v.iter().any(|x| !x.is_finite()) {
        return Err(AmiError::Degenerate("target token must be finite and nonzero".into()));
    }
    let [h1, h2] = (0..MAX_CRAFT_RETRIES)
        .find_map(|_| try_craft(v, beta, rng))
        .ok_or_else(|| AmiError::Numeric(format!("rank deficient after {MAX_CRAFT_RETRIES} attempts")))?;
    let mut w_o = Matrix::zeros(2 * d, HEADS * d);
    for i in 0..d {
        w_o[(i, i)] = 1.0;
        w_o[(i, d + i)] = -1.0;
        w_o[(d + i, 2 * d + i)] = -1.0;
        w_o[(d + i, 3 * d + i)] = 1.0;
    }
    let heads = vec![h1.clone(), h2.clone(), h1, h2];
    AttnParams::new(heads, w_o, vec![-gamma; 2 * d])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarDelta {
    pub value: f64,
}

/// `2 M (l_x - 1) exp(2 / l_x - beta * delta)`.
pub fn compute_bar_delta(m: f64, l_x: usize, beta: f64, delta: f64) -> Result<BarDelta> {
    if !(m > 0.0) || l_x == 0 || !(beta > 0.0) || !(delta > 0.0) {
        return Err(AmiError::Config(format!(
            "bar delta needs positive inputs, got M = {m}, l_x = {l_x}, beta = {beta}, delta = {delta}"
        )));
    }
    let l = l_x as f64;
    Ok(BarDelta { value: 2.0 * m * (l - 1.0) * (2.0 / l - beta * delta).exp() })
}

/// `gamma = 2 * bar_delta` from measured data statistics.
pub fn auto_gamma(stats: &DataStats, beta: f64, l_x: usize) -> Result<f64> {
    if !(stats.delta > 0.0) {
        return Err(AmiError::Degenerate(format!(
            "data is not separated (delta = {}), the attention attack has no guarantee",
            stats.delta
        )));
    }
    Ok(2.0 * compute_bar_delta(stats.m, l_x, beta, stats.delta)?.value)
}

/// Guesses 1 iff some `W_O` gradient is nonzero.
pub fn attn_guess(report: &GradientReport) -> Result<Guess> {
    if !report.is_monitored("W_O") {
        return Err(AmiError::Contract("attention guess needs the W_O gradient".into()));
    }
    Ok(Guess::from_score(report.score()))
}
