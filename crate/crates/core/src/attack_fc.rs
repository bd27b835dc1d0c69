//! FC adversary: two crafted layers whose monitored unit fires only within L1
//! distance `tau` of the target.

use std::fmt;
use std::str::FromStr;

use crate::data::TokenBatch;
use crate::error::{AmiError, Result};
use crate::nn::linalg::{from_columns, Matrix};
use crate::nn::{FcParams, GradientReport, Guess};

/// `tau` used when no finite dictionary bounds the input space.
pub const TAU_FALLBACK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FcVariant {
    /// The whole flattened sequence is one input.
    Full,
    /// Each token is forwarded on its own; the target is one token of `T`.
    Token,
}

impl FcVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            FcVariant::Full => "full",
            FcVariant::Token => "token",
        }
    }
}

impl fmt::Display for FcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FcVariant {
    type Err = AmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FcVariant::Full),
            "token" => Ok(FcVariant::Token),
            other => Err(AmiError::Config(format!("unknown FC variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcAttackConfig {
    pub variant: FcVariant,
    pub token_index: usize,
    pub tau: Tau,
}

impl FcAttackConfig {
    pub fn new(variant: FcVariant) -> Self {
        FcAttackConfig { variant, token_index: 0, tau: Tau::Auto }
    }

    pub fn validate(&self, l_x: usize) -> Result<()> {
        if let Tau::Value(t) = self.tau {
            if !(t > 0.0) || !t.is_finite() {
                return Err(AmiError::Config(format!("attack.tau must be > 0, got {t}")));
            }
        }
        if self.variant == FcVariant::Token && self.token_index >= l_x {
            return Err(AmiError::Config(format!(
                "attack.token_index {} out of range for l_x = {l_x}",
                self.token_index
            )));
        }
        Ok(())
    }
}

/// `W_1 = [I; -I]`, `b_1 = [-T; T]`, `W_2[1, :] = -1`, `b_2[1] = tau`.
pub fn craft_fc(target: &[f64], tau: f64) -> Result<FcParams> {
    if !(tau > 0.0) {
        return Err(AmiError::Config(format!("tau must be > 0, got {tau}")));
    }
    let d = target.len();
    if d == 0 {
        return Err(AmiError::Shape("empty target".into()));
    }
    let mut w1 = Matrix::zeros(2 * d, d);
    for i in 0..d {
        w1[(i, i)] = 1.0;
        w1[(d + i, i)] = -1.0;
    }
    let b1: Vec<f64> = target.iter().map(|t| -t).chain(target.iter().copied()).collect();
    FcParams::new(w1, b1, vec![-1.0; 2 * d], tau)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Half the smallest nonzero pairwise L1 distance.
pub fn auto_tau(vectors: &[&[f64]]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for (i, a) in vectors.iter().enumerate() {
        for b in &vectors[i + 1..] {
            let dist = l1_distance(a, b);
            if dist > 0.0 && dist < best {
                best = dist;
            }
        }
    }
    if !best.is_finite() {
        return Err(AmiError::Degenerate("need at least two distinct vectors to pick tau".into()));
    }
    Ok(best / 2.0)
}

/// Guesses membership from `|grad b_2[1]|`.
pub fn fc_guess(report: &GradientReport) -> Result<Guess> {
    if !report.is_monitored("b_2_1") {
        return Err(AmiError::Contract("FC guess needs the b_2_1 gradient".into()));
    }
    let g = report
        .get("b_2_1")
        .ok_or_else(|| AmiError::Contract("b_2_1 gradient missing".into()))?;
    Ok(Guess::from_score(g[(0, 0)].abs()))
}

/// Selects token `index` of a row-major sequence.
pub fn select_token(seq: &[f64], l_x: usize, d_x: usize, index: usize) -> Result<&[f64]> {
    if seq.len() != l_x * d_x {
        return Err(AmiError::Shape(format!("sequence of {} values, expected {}", seq.len(), l_x * d_x)));
    }
    if index >= l_x {
        return Err(AmiError::Shape(format!("token {index} of a {l_x}-token sequence")));
    }
    Ok(&seq[index * d_x..(index + 1) * d_x])
}

/// Attack target for the variant: the flattened sequence (already row-major) or one token.
pub fn flatten_target(variant: FcVariant, seq: &[f64], l_x: usize, d_x: usize, token_index: usize) -> Result<Vec<f64>> {
    match variant {
        FcVariant::Full => {
            if seq.len() != l_x * d_x {
                return Err(AmiError::Shape(format!("sequence of {} values, expected {}", seq.len(), l_x * d_x)));
            }
            Ok(seq.to_vec())
        }
        FcVariant::Token => Ok(select_token(seq, l_x, d_x, token_index)?.to_vec()),
    }
}

/// Model inputs for the variant: one column per sequence (Full) or per token (Token).
pub fn flatten_sequences(variant: FcVariant, seqs: &[&[f64]], l_x: usize, d_x: usize) -> Result<Matrix> {
    let len = l_x * d_x;
    if let Some((i, s)) = seqs.iter().enumerate().find(|(_, s)| s.len() != len) {
        return Err(AmiError::Shape(format!("sequence {i} has {} values, expected {len}", s.len())));
    }
    let data = seqs.concat();
    Ok(match variant {
        FcVariant::Full => from_columns(&data, len, seqs.len()),
        FcVariant::Token => from_columns(&data, d_x, seqs.len() * l_x),
    })
}

pub fn flatten_batch(variant: FcVariant, batch: &TokenBatch) -> Result<Matrix> {
    let seqs: Vec<&[f64]> = batch.sequences().collect();
    flatten_sequences(variant, &seqs, batch.l_x(), batch.d_x())
}
