//! Differentiable substrate: matrices, a reverse-mode tape, named parameter
//! storage and the AdamW optimizer.
//!
//! The tape works on whole mini-batches. Each recorded value is a
//! [`Matrix`] with one row per sample, so a linear layer over a batch is a
//! single matrix product rather than one small product per sample.

mod lstm;
mod matrix;
mod optim;
mod params;
mod tape;

pub use matrix::{matmul, Matrix};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{coefficient_of_variation, top_k_indices, NodeId, Tape, BCE_CLAMP, CV_MEAN_FLOOR};

pub(crate) use tape::bce_value;

use crate::error::{Error, Result};

/// `w * x + b` for a single input vector.
pub fn linear_forward(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::shape(
            "linear_forward",
            &w.shape(),
            &[x.len(), b.len()],
        ));
    }
    Ok((0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[r])
        .collect())
}

/// Numerically stable softmax of one vector.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let mut out = z.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}
