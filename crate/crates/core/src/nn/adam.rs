use serde::{Deserialize, Serialize};

use super::{NetworkParams, Scalar};
use crate::error::{Error, Result};

/// Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self::with_hyperparameters(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn for_params(params: &NetworkParams<T>) -> Self {
        Self::new(params.len())
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &[T], learning_rate: f64) -> Result<()> {
        let n = params.len();
        for got in [grads.len(), self.first_moment.len(), self.second_moment.len()] {
            if got != n {
                return Err(Error::ShapeMismatch { expected: n, got });
            }
        }
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let step_size = T::of(learning_rate / correction1);
        let inv_sqrt_c2 = T::of(1.0 / correction2.sqrt());
        let eps = T::of(self.epsilon);

        let theta = params.as_mut_slice();
        for i in 0..n {
            let g = grads[i];
            let m = b1 * self.first_moment[i] + (one - b1) * g;
            let v = b2 * self.second_moment[i] + (one - b2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            theta[i] = theta[i] - step_size * m / (v.sqrt() * inv_sqrt_c2 + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> NetworkParams<f64> {
        NetworkParams::init(Architecture::default(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let before = p.clone();
        let mut adam = AdamState::for_params(&p);
        let grads: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 0.3 } else { -7.0 }).collect();
        adam.step(&mut p, &grads, 5e-4).unwrap();
        for ((new, old), g) in p.as_slice().iter().zip(before.as_slice()).zip(&grads) {
            let moved = new - old;
            assert!((moved + 5e-4 * g.signum()).abs() < 1e-9, "{moved}");
        }
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut adam = AdamState::for_params(&p);
        let zeros = vec![0.0; p.len()];
        adam.step(&mut p, &zeros, 5e-4).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn deterministic() {
        let grads: Vec<f64> = (0..params().len()).map(|i| (i as f64).sin()).collect();
        let run = || {
            let mut p = params();
            let mut adam = AdamState::for_params(&p);
            adam.step(&mut p, &grads, 1e-3).unwrap();
            adam.step(&mut p, &grads, 1e-3).unwrap();
            (p, adam)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = params();
        let mut adam = AdamState::for_params(&p);
        assert!(matches!(
            adam.step(&mut p, &[1.0, 2.0], 1e-3),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut short = AdamState::<f64>::new(3);
        let zeros = vec![0.0; p.len()];
        assert!(short.step(&mut p, &zeros, 1e-3).is_err());
    }
}
