use super::{RngStream, Scalar, Tensor};

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-uniform for leaky ReLU with the given negative slope:
    /// bound `sqrt(6 / ((1 + slope²) · fan_in))`.
    KaimingUniform {
        fan_in: usize,
        slope: f64,
    },
    Uniform(f64, f64),
    Zeros,
}

pub fn init<T: Scalar>(shape: &[usize], scheme: Init, rng: &mut RngStream) -> Tensor<T> {
    match scheme {
        Init::Zeros => Tensor::zeros(shape),
        Init::Uniform(lo, hi) => Tensor::from_fn(shape, |_| rng.uniform(lo, hi)),
        Init::KaimingUniform { fan_in, slope } => {
            let bound = (6.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
            Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
        }
    }
}
