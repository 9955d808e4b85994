use rand::Rng as _;

use super::Scalar;
use crate::rng::Rng;

/// Parameter initializer: fan-in scaled uniform draws from a seeded stream.
pub struct ParamInit {
    rng: Rng,
}

impl ParamInit {
    pub fn new(rng: Rng) -> Self {
        Self { rng }
    }

    /// He-uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn weight<F: Scalar>(&mut self, len: usize, fan_in: usize) -> Vec<F> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(len, bound)
    }

    /// Biases, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn bias<F: Scalar>(&mut self, len: usize, fan_in: usize) -> Vec<F> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(len, bound)
    }

    fn uniform<F: Scalar>(&mut self, len: usize, bound: f64) -> Vec<F> {
        (0..len)
            .map(|_| F::lit(self.rng.random_range(-bound..bound)))
            .collect()
    }
}
