use serde::{Deserialize, Serialize};

use super::{GradientTape, Regressor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, batch_size: 32, max_epochs: 300, seed: 0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

/// `w <- w - lr * g / sample_count`, in place.
pub fn sgd_step<T: Scalar>(net: &mut Regressor<T>, tape: &GradientTape<T>, learning_rate: T) -> Result<()> {
    if !tape.matches(net) {
        return Err(Error::Shape("gradient tape does not match the network".into()));
    }
    if tape.sample_count == 0 {
        return Ok(());
    }
    let step = learning_rate / T::lit(tape.sample_count as f64);
    for (layer, (gw, gb)) in net.layers.iter_mut().zip(tape.weights.iter().zip(&tape.bias)) {
        for (w, &g) in layer.weights.iter_mut().zip(gw).chain(layer.bias.iter_mut().zip(gb)) {
            *w = *w - step * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{backward_weighted, Activation, Layer, WeightedSample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tape_leaves_net_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Regressor<f64> = Regressor::random(2, &[3], 1, Activation::Relu, &mut rng).unwrap();
        let before = net.clone();
        let mut tape = GradientTape::zeros(&net);
        tape.sample_count = 4;
        sgd_step(&mut net, &tape, 0.1).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn single_parameter_arithmetic() {
        let layer = Layer::new(1, 1, vec![1.0], vec![0.0], Activation::Identity).unwrap();
        let mut net: Regressor<f64> = Regressor::new(vec![layer]).unwrap();
        let mut tape = GradientTape::zeros(&net);
        tape.weights[0][0] = 2.0;
        tape.sample_count = 1;
        sgd_step(&mut net, &tape, 0.1).unwrap();
        assert!((net.layers()[0].weights[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_steps_are_bit_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut net: Regressor<f64> = Regressor::random(2, &[8], 2, Activation::Relu, &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 40.0, (i % 7) as f64 / 7.0]).collect();
            let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * 2.0, x[1] - x[0]]).collect();
            for _ in 0..2 {
                let batch: Vec<_> = xs.iter().zip(&ys).map(|(x, y)| WeightedSample { x, y, weight: 0.5 }).collect();
                let tape = backward_weighted(&net, &batch, &[1.0, 1.0]).unwrap();
                sgd_step(&mut net, &tape, 0.05).unwrap();
            }
            net.flat_params()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a: Regressor<f64> = Regressor::random(2, &[3], 1, Activation::Relu, &mut rng).unwrap();
        let b: Regressor<f64> = Regressor::random(2, &[4], 1, Activation::Relu, &mut rng).unwrap();
        let tape = GradientTape::zeros(&b);
        assert!(sgd_step(&mut a, &tape, 0.1).is_err());
    }
}
