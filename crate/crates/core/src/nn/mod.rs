//! Minimal tensor and reverse-mode autodiff engine used by both networks.

mod gemm;
mod params;
mod tape;
mod tensor;

pub use params::{Adam, AdamConfig, GradStore, ParamId, ParamStore};
pub use tape::{shuffle_permutation, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::{conv_forward as tape_conv, sigmoid};

/// Weighted-sum probe used by gradient checks: `Σ out ⊙ r` for a fixed `r`.
#[cfg(test)]
pub(crate) fn probe_dot(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}
