//! Forward and hand-written backward passes for the two attacked layer families.

pub mod attn;
pub mod fc;
pub mod linalg;

use std::collections::BTreeMap;

pub use attn::{attn_backward, attn_forward, attn_loss, AttnHead, AttnParams, HEADS};
pub use fc::{fc_backward, fc_forward, fc_forward_batch, fc_loss, FcParams};
pub use linalg::{matmul, pseudo_inverse, qr_orthonormal, softmax_cols, Matrix, QrFactors};

use crate::error::{AmiError, Result};

/// Threshold separating "nonzero" gradients from floating-point dust.
pub const ETA: f64 = 1e-9;

/// Gradients the server observes after one client step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    grads: BTreeMap<String, Matrix>,
    monitored: Vec<String>,
    score: f64,
}

impl GradientReport {
    /// `score` is the largest absolute entry over the monitored gradients.
    pub fn new(grads: BTreeMap<String, Matrix>, monitored: Vec<String>) -> Result<Self> {
        let mut score = 0.0f64;
        for name in &monitored {
            let g = grads
                .get(name)
                .ok_or_else(|| AmiError::Contract(format!("monitored gradient `{name}` missing")))?;
            score = score.max(linalg::max_abs(g));
        }
        Ok(GradientReport { grads, monitored, score })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn monitored(&self) -> &[String] {
        &self.monitored
    }

    pub fn is_monitored(&self, name: &str) -> bool {
        self.monitored.iter().any(|m| m == name)
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// A dense weight matrix with a cached list of nonzeros when it is sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    dense: Matrix,
    nonzeros: Option<Vec<(usize, usize, f64)>>,
}

impl Weights {
    pub fn new(dense: Matrix) -> Self {
        let (m, k) = (dense.nrows(), dense.ncols());
        let mut nz = Vec::new();
        let mut sparse = true;
        'scan: for j in 0..k {
            for (i, &w) in dense.col_as_slice(j).iter().enumerate() {
                if w != 0.0 {
                    nz.push((i, j, w));
                    if 8 * nz.len() > m * k {
                        sparse = false;
                        break 'scan;
                    }
                }
            }
        }
        Weights { dense, nonzeros: sparse.then_some(nz) }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.dense
    }

    pub fn nrows(&self) -> usize {
        self.dense.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.dense.ncols()
    }

    /// `W x` for a matrix of column inputs.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.dense.ncols(), x.nrows(), "weight/input dimensions");
        match &self.nonzeros {
            Some(nz) => {
                let mut out = Matrix::zeros(self.dense.nrows(), x.ncols());
                for j in 0..x.ncols() {
                    let xj = x.col_as_slice(j);
                    let oj = out.col_as_slice_mut(j);
                    for &(i, l, w) in nz {
                        oj[i] += w * xj[l];
                    }
                }
                out
            }
            None => matmul(&self.dense, x),
        }
    }
}

/// A binary membership guess with the score it was thresholded from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guess {
    pub bit: u8,
    pub score: f64,
}

impl Guess {
    /// Guesses 1 iff `score > ETA`.
    pub fn from_score(score: f64) -> Self {
        Guess { bit: (score > ETA) as u8, score }
    }
}
