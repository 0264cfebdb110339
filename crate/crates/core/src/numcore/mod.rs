//! Minimal float64 tensor substrate with reverse-mode gradients.

pub mod gradcheck;
pub mod math;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use math::logsumexp;
pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{ParamId, Parameter, Params};
pub use rng::{derive_seed, mix64, Rng, RngState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Raw row-major kernels on slices.
pub mod tensor_ops {
    pub use super::tensor::{dot, matmul, matmul_nt, matmul_tn, transpose};
}

use crate::error::Result;

/// Matrix product of two constant tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(x, y)?;
    Ok(tape.value(out).clone())
}

/// Row softmax of a constant tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.require_matrix("softmax_rows")?;
    Ok(Tensor::from_parts(alloc::vec![m, n], tape::softmax_rows(x.data(), m, n, None)))
}

/// Row log-softmax of a constant tensor.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.log_softmax_rows(v)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
