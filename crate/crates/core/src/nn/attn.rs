//! Four-head self-attention whose head outputs are mixed by `W_O` and passed through a ReLU.

use std::collections::BTreeMap;

use super::linalg::{matmul, softmax_cols, Matrix};
use super::{GradientReport, Weights};
use crate::error::{AmiError, Result};

pub const HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    heads: Vec<AttnHead>,
    w_o: Weights,
    b_o: Vec<f64>,
    d_x: usize,
    d_attn: usize,
    d_hid: usize,
}

impl AttnParams {
    pub fn new(heads: Vec<AttnHead>, w_o: Matrix, b_o: Vec<f64>) -> Result<Self> {
        if heads.len() != HEADS {
            return Err(AmiError::Shape(format!("expected {HEADS} heads, got {}", heads.len())));
        }
        let d_x = heads[0].w_q.ncols();
        let d_attn = heads[0].w_q.nrows();
        let d_hid = heads[0].w_v.nrows();
        for (h, head) in heads.iter().enumerate() {
            let dims = [
                (head.w_q.nrows(), head.w_q.ncols()),
                (head.w_k.nrows(), head.w_k.ncols()),
                (head.w_v.nrows(), head.w_v.ncols()),
            ];
            if dims != [(d_attn, d_x), (d_attn, d_x), (d_hid, d_x)] {
                return Err(AmiError::Shape(format!("head {h} has dims {dims:?}")));
            }
        }
        if w_o.ncols() != HEADS * d_hid || b_o.len() != w_o.nrows() {
            return Err(AmiError::Shape(format!(
                "W_O is {}x{} and b_O has {} entries for d_hid = {d_hid}",
                w_o.nrows(),
                w_o.ncols(),
                b_o.len()
            )));
        }
        if d_attn == 0 {
            return Err(AmiError::Shape("d_attn must be positive".into()));
        }
        Ok(AttnParams { heads, w_o: Weights::new(w_o), b_o, d_x, d_attn, d_hid })
    }

    pub fn heads(&self) -> &[AttnHead] {
        &self.heads
    }

    pub fn w_o(&self) -> &Matrix {
        self.w_o.matrix()
    }

    pub fn b_o(&self) -> &[f64] {
        &self.b_o
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_attn(&self) -> usize {
        self.d_attn
    }

    pub fn d_hid(&self) -> usize {
        self.d_hid
    }

    pub fn d_y(&self) -> usize {
        self.b_o.len()
    }

    /// Same layer with a different output projection.
    pub fn with_output(&self, w_o: Matrix, b_o: Vec<f64>) -> Result<Self> {
        AttnParams::new(self.heads.clone(), w_o, b_o)
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.nrows() != self.d_x || x.ncols() == 0 {
            return Err(AmiError::Shape(format!(
                "sequence is {}x{}, layer expects {} rows",
                x.nrows(),
                x.ncols(),
                self.d_x
            )));
        }
        Ok(())
    }

    /// Head outputs `Z^1..Z^4` stacked vertically (`4 d_hid x l`).
    pub fn head_outputs(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let l = x.ncols();
        let scale = 1.0 / (self.d_attn as f64).sqrt();
        let mut z = Matrix::zeros(HEADS * self.d_hid, l);
        for (h, head) in self.heads.iter().enumerate() {
            let q = matmul(&head.w_q, x);
            let k = matmul(&head.w_k, x);
            let mut scores = k.transpose() * &q;
            for j in 0..l {
                scores.col_as_slice_mut(j).iter_mut().for_each(|s| *s *= scale);
            }
            let attn = softmax_cols(&scores);
            let v = matmul(&head.w_v, x);
            let zh = &v * &attn;
            for j in 0..l {
                z.col_as_slice_mut(j)[h * self.d_hid..(h + 1) * self.d_hid].copy_from_slice(zh.col_as_slice(j));
            }
        }
        Ok(z)
    }

    /// `W_O Z + b_O`, before the ReLU.
    pub fn output_pre(&self, z: &Matrix) -> Matrix {
        let mut pre = self.w_o.apply(z);
        for j in 0..pre.ncols() {
            for (v, b) in pre.col_as_slice_mut(j).iter_mut().zip(&self.b_o) {
                *v += b;
            }
        }
        pre
    }
}

/// `Y = ReLU(sum_h W_O^h Z^h + b_O)` for one sequence given as `d_x x l` columns.
pub fn attn_forward(params: &AttnParams, x: &Matrix) -> Result<Matrix> {
    let z = params.head_outputs(x)?;
    let mut y = params.output_pre(&z);
    for j in 0..y.ncols() {
        y.col_as_slice_mut(j).iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(y)
}

/// Surrogate client loss: sum of `Y` entries averaged over sequences and positions.
pub fn attn_loss(params: &AttnParams, batch: &[Matrix]) -> Result<f64> {
    let mut total = 0.0;
    let mut positions = 0usize;
    for x in batch {
        let y = attn_forward(params, x)?;
        positions += y.ncols();
        for j in 0..y.ncols() {
            total += y.col_as_slice(j).iter().sum::<f64>();
        }
    }
    Ok(total / positions as f64)
}

/// Gradient of the surrogate loss with respect to `W_O`, which is the monitored tensor.
///
/// Every sequence must have the same length; the loss normalizer is `n * l_x`.
pub fn attn_backward(params: &AttnParams, batch: &[Matrix]) -> Result<GradientReport> {
    if batch.is_empty() {
        return Err(AmiError::Shape("empty batch".into()));
    }
    let l = batch[0].ncols();
    if batch.iter().any(|x| x.ncols() != l) {
        return Err(AmiError::Shape("sequences of different lengths".into()));
    }
    let norm = 1.0 / (batch.len() * l) as f64;
    let mut g = Matrix::zeros(params.d_y(), params.w_o().ncols());
    for x in batch {
        let z = params.head_outputs(x)?;
        let pre = params.output_pre(&z);
        for pos in 0..l {
            let zc = z.col_as_slice(pos);
            for (i, &p) in pre.col_as_slice(pos).iter().enumerate() {
                if p > 0.0 {
                    for (c, &zv) in zc.iter().enumerate() {
                        g[(i, c)] += zv * norm;
                    }
                }
            }
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert("W_O".to_string(), g);
    GradientReport::new(grads, vec!["W_O".to_string()])
}
