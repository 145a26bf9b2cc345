//! Dense tensors, reverse-mode differentiation, and the optimizer.

mod graph;
mod optim;
mod schedule;
mod tensor;

pub use graph::{BinaryKind, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use schedule::LrSchedule;
pub use tensor::Tensor;


/// Fill value for masked attention scores.
pub const MASK_FILL: f64 = -1e9;

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// GELU in its exact form `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    let pdf = libm::exp(-0.5 * x * x) * 0.5 * core::f64::consts::FRAC_2_SQRT_PI * FRAC_1_SQRT_2;
    normal_cdf(x) + x * pdf
}

/// Sums `terms` in a canonical order (ascending), so the result depends only
/// on the multiset of values. Reorders `terms` in place.
pub fn sum_unordered(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}
