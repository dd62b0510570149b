//! Dense tensors, reverse-mode differentiation, convolution kernels, the Adam
//! optimizer and a regularized least-squares solver.

mod autograd;
mod conv;
mod gemm;
mod gradcheck;
mod linalg;
mod optim;
mod tensor;

pub use autograd::{BatchStats, Graph, NormMode, Var};
pub use conv::{conv2d, conv2d_transpose, conv_out_size, conv_transpose_out_size, set_threads, threads};
pub use gradcheck::{max_gradient_error, op_suite};
pub use linalg::{ridge_solve, Matrix, RidgeMethod};
pub use optim::{adam_update, AdamConfig, AdamState};
pub use tensor::Tensor;

pub(crate) use tensor::read_u32;

use thiserror::Error;

/// Lower bound applied inside logarithms of probabilities.
pub const LOG_FLOOR: f32 = 1e-7;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("malformed tensor data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(leaky_relu(1.0, 0.2), 1.0);
        assert!((leaky_relu(-1.0, 0.2) + 0.2).abs() < 1e-7);
        assert_eq!(0f32.tanh(), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn sigmoid_is_complementary() {
        for i in -40..=40 {
            let x = i as f32 * 0.37;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-6, "x = {x}");
        }
    }
}
