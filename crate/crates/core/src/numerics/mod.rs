//! Differentiable numeric primitives.
//!
//! [`Tensor`] is a plain row-major `f64` array. The free functions here are
//! forward-only conveniences; training goes through [`Tape`], which records
//! the same kernels and replays their backward rules in reverse.

mod gradcheck;
pub mod kernels;
pub mod layers;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_scalar, GradCheckOptions, ScalarEval};
pub use kernels::{LevelShape, SampleStats};
pub use layers::{init_sa_block, sa_block, BlockShape, ParamInit};
pub use tape::{Gradients, NodeId, ParamStore, Tape};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `y = x W + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
    let y = tape.linear(x, w, b)?;
    Ok(tape.value(y).clone())
}

/// Softmax over the trailing axis.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::shape("softmax", "empty trailing axis"));
    }
    let group = v.last_dim();
    Tensor::new(v.shape().to_vec(), kernels::softmax_forward(v.data(), group))
}

/// Layer normalization over the trailing axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let (x, g, b) = (tape.input(x.clone()), tape.input(gamma.clone()), tape.input(beta.clone()));
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// Pre-norm transformer block `x + MHSA(LN(x))`, then `+ MLP(LN(·))`, with
/// parameters under `prefix` in `params`.
pub fn self_attention_block(tokens: &Tensor, params: &ParamStore, prefix: &str, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::with_params(params);
    let x = tape.input(tokens.clone());
    let y = sa_block(&mut tape, x, prefix, heads)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests;
