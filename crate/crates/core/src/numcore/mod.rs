//! Dense `f64` tensors, reverse-mode differentiation, and the eager
//! counterparts of the differentiable operations.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn eager<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.tensor(out))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eager(&[a, b], |t, v| t.matmul(v[0], v[1]))
}

pub fn layer_norm(h: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eager(&[h, gamma, beta], |t, v| t.layer_norm(v[0], v[1], v[2], eps))
}

pub fn conv1d_grouped(h: &Tensor, kernel: &Tensor, groups: usize) -> Result<Tensor> {
    eager(&[h, kernel], |t, v| t.conv1d_grouped(v[0], v[1], groups))
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    eager(&[x], |t, v| t.softmax(v[0]))
}

pub fn log_sum_exp(x: &Tensor) -> Result<Tensor> {
    eager(&[x], |t, v| t.log_sum_exp(v[0]))
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    eager(&[x], |t, v| t.l2_normalize(v[0]))
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate {
            op: "cosine_similarity",
            detail: "zero-norm input".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
