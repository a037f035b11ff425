use rayon::prelude::*;

use super::Regressor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Samples per parallel work unit. Fixed so the reduction order, and hence
/// the summed gradient, does not depend on the thread count.
const CHUNK: usize = 16;

/// Summed parameter gradients, aligned 1:1 with a [`Regressor`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
    pub sample_count: usize,
}

impl<T: Scalar> GradientTape<T> {
    pub fn zeros(net: &Regressor<T>) -> Self {
        Self {
            weights: net.layers().iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: net.layers().iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
            sample_count: 0,
        }
    }

    pub fn reset(&mut self) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g = T::zero());
        }
        self.sample_count = 0;
    }

    pub fn matches(&self, net: &Regressor<T>) -> bool {
        self.weights.len() == net.layers().len()
            && net
                .layers()
                .iter()
                .zip(self.weights.iter().zip(&self.bias))
                .all(|(l, (w, b))| l.weights.len() == w.len() && l.bias.len() == b.len())
    }

    /// Gradients in [`Regressor::flat_params`] order.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights).chain(self.bias.iter_mut().zip(&other.bias)) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        self.sample_count += other.sample_count;
    }
}

/// One training pair with its responsibility weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a, T> {
    pub x: &'a [T],
    pub y: &'a [T],
    pub weight: T,
}

/// Gradient of `sum_n r_n ||(y_n - phi(x_n; w)) / s||^2` for every parameter.
///
/// A sample with zero weight contributes exactly zero.
pub fn backward_weighted<T: Scalar>(
    net: &Regressor<T>,
    batch: &[WeightedSample<'_, T>],
    normalizer: &[T],
) -> Result<GradientTape<T>> {
    let d = net.output_dim();
    if normalizer.len() != d {
        return Err(Error::Shape(format!("normalizer has {} entries, output dim is {d}", normalizer.len())));
    }
    if normalizer.iter().any(|&s| !(s > T::zero())) {
        return Err(Error::config("normalizer entries must be positive"));
    }
    for s in batch {
        if s.y.len() != d {
            return Err(Error::Shape(format!("target has {} entries, output dim is {d}", s.y.len())));
        }
    }
    let inv_sq: Vec<T> = normalizer.iter().map(|&s| T::one() / (s * s)).collect();
    let two = T::lit(2.0);
    let inputs: Vec<&[T]> = batch.iter().map(|s| s.x).collect();
    backward_with(net, &inputs, |i, out| {
        let s = &batch[i];
        out.iter()
            .zip(s.y)
            .zip(&inv_sq)
            .map(|((&o, &y), &k)| -two * s.weight * (y - o) * k)
            .collect()
    })
}

/// Backpropagates per-sample output gradients `dL/dphi(x_i)` supplied by
/// `output_grad(i, phi(x_i))` and sums the parameter gradients over the batch.
pub fn backward_with<T, F>(net: &Regressor<T>, inputs: &[&[T]], output_grad: F) -> Result<GradientTape<T>>
where
    T: Scalar,
    F: Fn(usize, &[T]) -> Vec<T> + Sync,
{
    let partials: Vec<Result<GradientTape<T>>> = inputs
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut tape = GradientTape::zeros(net);
            for (k, x) in chunk.iter().enumerate() {
                let i = c * CHUNK + k;
                let (pre, post) = net.forward_trace(x)?;
                let g = output_grad(i, &post[post.len() - 1]);
                if g.len() != net.output_dim() {
                    return Err(Error::Shape("output gradient length differs from output dim".into()));
                }
                backprop_sample(net, &pre, &post, g, &mut tape)?;
                tape.sample_count += 1;
            }
            Ok(tape)
        })
        .collect();

    let mut total = GradientTape::zeros(net);
    for p in partials {
        total.accumulate(&p?);
    }
    Ok(total)
}

fn backprop_sample<T: Scalar>(
    net: &Regressor<T>,
    pre: &[Vec<T>],
    post: &[Vec<T>],
    out_grad: Vec<T>,
    tape: &mut GradientTape<T>,
) -> Result<()> {
    let mut delta = out_grad;
    for li in (0..net.layers().len()).rev() {
        let layer = &net.layers()[li];
        for ((d, &z), &a) in delta.iter_mut().zip(&pre[li]).zip(&post[li + 1]) {
            *d = *d * layer.activation.derivative(z, a);
        }
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: li });
        }
        let input = &post[li];
        let n_in = layer.in_dim();
        for (o, &d) in delta.iter().enumerate() {
            tape.bias[li][o] = tape.bias[li][o] + d;
            if d != T::zero() {
                let row = &mut tape.weights[li][o * n_in..(o + 1) * n_in];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g = *g + d * x;
                }
            }
        }
        if li > 0 {
            let mut next = vec![T::zero(); n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let row = &layer.weights[o * n_in..(o + 1) * n_in];
                for (n, &w) in next.iter_mut().zip(row) {
                    *n = *n + w * d;
                }
            }
            delta = next;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weighted_loss(net: &Regressor<f64>, xs: &[Vec<f64>], ys: &[Vec<f64>], r: &[f64], s: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .zip(r)
            .map(|((x, y), &w)| {
                let o = net.forward(x).unwrap();
                w * o.iter().zip(y).zip(s).map(|((o, y), s)| ((y - o) / s).powi(2)).sum::<f64>()
            })
            .sum()
    }

    type Fixture = (Regressor<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>);

    fn fixture(seed: u64, hidden: &[usize]) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Regressor::random(3, hidden, 2, Activation::Tanh, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        (net, xs, ys, r)
    }

    fn tape_for(net: &Regressor<f64>, xs: &[Vec<f64>], ys: &[Vec<f64>], r: &[f64], s: &[f64]) -> GradientTape<f64> {
        let batch: Vec<_> = xs.iter().zip(ys).zip(r).map(|((x, y), &w)| WeightedSample { x, y, weight: w }).collect();
        backward_weighted(net, &batch, s).unwrap()
    }

    #[test]
    fn matches_central_differences() {
        let (net, xs, ys, r) = fixture(3, &[4, 4]);
        let s = [1.5, 0.5];
        let grad = tape_for(&net, &xs, &ys, &r, &s).flat();
        let params = net.flat_params();
        let h = 1e-5;
        for (k, g) in grad.iter().enumerate() {
            let mut p = params.clone();
            let mut probe = net.clone();
            p[k] += h;
            probe.set_flat_params(&p).unwrap();
            let up = weighted_loss(&probe, &xs, &ys, &r, &s);
            p[k] -= 2.0 * h;
            probe.set_flat_params(&p).unwrap();
            let down = weighted_loss(&probe, &xs, &ys, &r, &s);
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4 || (g - fd).abs() < 1e-9, "param {k}: {g} vs {fd}");
        }
    }

    #[test]
    fn unit_weights_give_the_plain_l2_gradient() {
        let (net, xs, ys, _) = fixture(5, &[3]);
        let ones = vec![1.0; xs.len()];
        let weighted = tape_for(&net, &xs, &ys, &ones, &[1.0, 1.0]);

        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let plain = backward_with(&net, &inputs, |i, o| o.iter().zip(&ys[i]).map(|(o, y)| 2.0 * (o - y)).collect()).unwrap();
        assert_eq!(weighted, plain);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (net, xs, ys, _) = fixture(9, &[4]);
        let tape = tape_for(&net, &xs, &ys, &[0.0; 5], &[1.0, 1.0]);
        assert!(tape.flat().iter().all(|&g| g == 0.0));
        assert_eq!(tape.sample_count, 5);
    }

    #[test]
    fn zero_residuals_are_a_fixed_point() {
        let (net, xs, _, r) = fixture(11, &[4]);
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| net.forward(x).unwrap()).collect();
        let tape = tape_for(&net, &xs, &ys, &r, &[1.0, 1.0]);
        assert!(tape.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_bad_normalizer() {
        let (net, xs, ys, r) = fixture(1, &[2]);
        let batch: Vec<_> = xs.iter().zip(&ys).zip(&r).map(|((x, y), &w)| WeightedSample { x, y, weight: w }).collect();
        assert!(backward_weighted(&net, &batch, &[1.0]).is_err());
        assert!(backward_weighted(&net, &batch, &[1.0, 0.0]).is_err());
    }
}
