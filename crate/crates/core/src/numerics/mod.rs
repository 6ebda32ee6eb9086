//! Dense tensors, reverse-mode differentiation and seeded randomness.

pub mod gradcheck;
mod layers;
pub mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use layers::{dropout, Linear, Mode};
pub use ops::{row_softmax, row_softmax_limit, sparse_dense_matmul};
pub use params::{ParamId, ParamStore};
pub use rng::{RngState, SeededRng, RNG_ALGORITHM};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};

/// Glorot-uniform matrix: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(fan_in, fan_out, -a, a)
}
