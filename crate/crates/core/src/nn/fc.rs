//! Two fully connected layers with ReLU, reduced to the single output unit the attack reads.

use std::collections::BTreeMap;

use super::linalg::{from_columns, Matrix};
use super::{GradientReport, Weights};
use crate::error::{AmiError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    w1: Weights,
    b1: Vec<f64>,
    w2_row: Vec<f64>,
    b2_1: f64,
}

impl FcParams {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2_row: Vec<f64>, b2_1: f64) -> Result<Self> {
        let d_t = w1.ncols();
        if w1.nrows() != 2 * d_t || b1.len() != 2 * d_t || w2_row.len() != 2 * d_t {
            return Err(AmiError::Shape(format!(
                "FC params for d_T = {d_t}: W_1 {}x{}, b_1 {}, W_2 row {}",
                w1.nrows(),
                w1.ncols(),
                b1.len(),
                w2_row.len()
            )));
        }
        Ok(FcParams { w1: Weights::new(w1), b1, w2_row, b2_1 })
    }

    pub fn d_t(&self) -> usize {
        self.w1.ncols()
    }

    pub fn w1(&self) -> &Matrix {
        self.w1.matrix()
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2_row(&self) -> &[f64] {
        &self.w2_row
    }

    pub fn b2_1(&self) -> f64 {
        self.b2_1
    }

    /// Number of weights and biases in the two layers restricted to the monitored unit.
    pub fn param_count(&self) -> usize {
        let d = self.d_t();
        2 * d * d + 2 * d + 2 * d + 1
    }

    fn check(&self, xs: &Matrix) -> Result<()> {
        if xs.nrows() != self.d_t() {
            return Err(AmiError::Shape(format!("input of dimension {} for d_T = {}", xs.nrows(), self.d_t())));
        }
        Ok(())
    }

    /// First-layer pre-activations, one column per input.
    pub fn hidden_pre(&self, xs: &Matrix) -> Result<Matrix> {
        self.check(xs)?;
        let mut h = self.w1.apply(xs);
        for j in 0..h.ncols() {
            for (v, b) in h.col_as_slice_mut(j).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        Ok(h)
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn output_pre(params: &FcParams, hidden_pre: &[f64]) -> f64 {
    let s: f64 = hidden_pre.iter().zip(&params.w2_row).map(|(&h, &w)| w * relu(h)).sum();
    s + params.b2_1
}

/// `z_0` for every column of `xs`.
pub fn fc_forward_batch(params: &FcParams, xs: &Matrix) -> Result<Vec<f64>> {
    let h = params.hidden_pre(xs)?;
    Ok((0..h.ncols()).map(|j| relu(output_pre(params, h.col_as_slice(j)))).collect())
}

pub fn fc_forward(params: &FcParams, x: &[f64]) -> Result<f64> {
    let xs = from_columns(x, x.len(), 1);
    Ok(fc_forward_batch(params, &xs)?[0])
}

/// Surrogate client loss: mean of `z_0` over the batch.
pub fn fc_loss(params: &FcParams, xs: &Matrix) -> Result<f64> {
    let z = fc_forward_batch(params, xs)?;
    Ok(z.iter().sum::<f64>() / z.len() as f64)
}

/// Gradients of the mean-`z_0` loss for `b_2[1]`, `W_2[1, :]` and `b_1`; only `b_2[1]` is monitored.
pub fn fc_backward(params: &FcParams, xs: &Matrix) -> Result<GradientReport> {
    if xs.ncols() == 0 {
        return Err(AmiError::Shape("empty batch".into()));
    }
    let h = params.hidden_pre(xs)?;
    let n = xs.ncols() as f64;
    let width = params.b1.len();
    let mut g_b2 = 0.0;
    let mut g_w2 = vec![0.0; width];
    let mut g_b1 = vec![0.0; width];
    for j in 0..h.ncols() {
        let col = h.col_as_slice(j);
        if output_pre(params, col) > 0.0 {
            g_b2 += 1.0;
            for (r, &v) in col.iter().enumerate() {
                if v > 0.0 {
                    g_w2[r] += v;
                    g_b1[r] += params.w2_row[r];
                }
            }
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert("b_2_1".to_string(), Matrix::from_fn(1, 1, |_, _| g_b2 / n));
    grads.insert("W_2_row".to_string(), Matrix::from_fn(width, 1, |i, _| g_w2[i] / n));
    grads.insert("b_1".to_string(), Matrix::from_fn(width, 1, |i, _| g_b1[i] / n));
    GradientReport::new(grads, vec!["b_2_1".to_string()])
}
