use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at ±2 std (linear and attention weights).
    TruncNormal(f64),
    /// Uniform(±1/√fan_in), the Kaiming-uniform variant with a = √5 (conv kernels).
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor<T: Scalar>(self, shape: &[usize], rng: &mut SeededRng) -> Tensor<T> {
        match self {
            Init::TruncNormal(std) => {
                Tensor::from_fn(shape.to_vec(), |_| T::of(rng.truncated_normal(std)))
            }
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| T::of(rng.uniform(-bound, bound)))
            }
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
        }
    }
}
