//! Parameter initialization helpers.

use rand::Rng;

use crate::tensor::Tensor;

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub(crate) fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}
