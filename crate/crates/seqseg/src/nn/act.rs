//! Elementwise activations with explicit backward passes.
//!
//! Backward functions take the forward *output* plus the upstream gradient;
//! every activation here can recover its local derivative from the output,
//! which avoids caching pre-activation values.

use ndarray::{Array, Dimension, Zip};

use crate::scalar::Scalar;

/// ELU with alpha = 1: `x` for `x > 0`, else `exp(x) - 1`.
pub fn elu<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { v.exp() - S::one() })
}

/// d(ELU)/dx given the forward output: 1 for positive outputs, else `y + 1`.
pub fn elu_backward<S: Scalar, D: Dimension>(y: &Array<S, D>, dy: &Array<S, D>) -> Array<S, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| if y > S::zero() { g } else { g * (y + S::one()) })
}

pub fn relu<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar, D: Dimension>(y: &Array<S, D>, dy: &Array<S, D>) -> Array<S, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| if y > S::zero() { g } else { S::zero() })
}

pub fn leaky_relu<S: Scalar, D: Dimension>(x: &Array<S, D>, slope: S) -> Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<S: Scalar, D: Dimension>(
    y: &Array<S, D>,
    dy: &Array<S, D>,
    slope: S,
) -> Array<S, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| if y > S::zero() { g } else { g * slope })
}

pub fn sigmoid<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// d(sigmoid)/dx given the forward output: `y (1 - y)`.
pub fn sigmoid_backward<S: Scalar, D: Dimension>(y: &Array<S, D>, dy: &Array<S, D>) -> Array<S, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| g * y * (S::one() - y))
}

pub fn tanh<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(S::tanh)
}

/// d(tanh)/dx given the forward output: `1 - y^2`.
pub fn tanh_backward<S: Scalar, D: Dimension>(y: &Array<S, D>, dy: &Array<S, D>) -> Array<S, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| g * (S::one() - y * y))
}
