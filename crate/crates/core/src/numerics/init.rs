use rand::Rng;

use super::tensor::Tensor;

/// Uniform samples in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(shape.to_vec(), data)
}

/// Glorot-style uniform init for a `[fan_in, fan_out]` matrix.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}
