//! Dense feedforward regressor with weighted backpropagation and plain SGD.

mod backward;
mod persist;
mod sgd;

pub use backward::{backward_weighted, backward_with, GradientTape, WeightedSample};
pub use persist::{load, load_from_path, peek_header, save, save_to_path, ModelHeader};
pub use sgd::{sgd_step, SgdConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Tanh => T::one() - a * a,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            _ => return None,
        })
    }
}

/// One dense layer: `a = act(W x + b)` with `W` stored row-major `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Scalar> Layer<T> {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias, activation, in_dim, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn affine(&self, x: &[T], z: &mut Vec<T>) {
        z.clear();
        for (row, &b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let mut acc = b;
            for (&w, &xi) in row.iter().zip(x) {
                acc = acc + w * xi;
            }
            z.push(acc);
        }
    }
}

/// Per-layer pre-activations and activations.
pub(crate) type Trace<T> = (Vec<Vec<T>>, Vec<Vec<T>>);

/// Feedforward regressor `phi(x; w)` from `R^M` to `R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Regressor<T> {
    /// Validates chaining, a linear output layer and finite parameters.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a regressor needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Shape("the output layer must use the identity activation".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if !layer.weights.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform initialized network with `hidden` units per hidden layer.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
            let act = if i + 1 == n { Activation::Identity } else { activation };
            layers.push(Layer::new(fan_in, fan_out, weights, vec![T::zero(); fan_out], act)?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weights row-major then bias.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters given for a network with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let (w, b) = (l.weights.len(), l.bias.len());
            l.weights.copy_from_slice(&params[offset..offset + w]);
            l.bias.copy_from_slice(&params[offset + w..offset + w + b]);
            offset += w + b;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut z);
            a.clear();
            a.extend(z.iter().map(|&v| layer.activation.apply(v)));
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
        }
        Ok(a)
    }

    /// Pre-activations and activations of every layer; entry 0 of the
    /// activations is the input itself.
    pub(crate) fn forward_trace(&self, x: &[T]) -> Result<Trace<T>> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(&post[i], &mut z);
            let a: Vec<T> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            pre.push(z);
            post.push(a);
        }
        Ok((pre, post))
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    /// Folds `x -> (x - offset) / scale` into the first layer so the network
    /// accepts raw inputs.
    pub fn fold_input_standardization(&mut self, offset: &[T], scale: &[T]) -> Result<()> {
        let first = &mut self.layers[0];
        if offset.len() != first.in_dim || scale.len() != first.in_dim {
            return Err(Error::Shape("input standardization does not match the input dim".into()));
        }
        for (row, b) in first.weights.chunks_exact_mut(first.in_dim).zip(first.bias.iter_mut()) {
            for ((w, &m), &s) in row.iter_mut().zip(offset).zip(scale) {
                *w = *w / s;
                *b = *b - *w * m;
            }
        }
        Ok(())
    }

    /// Folds `y -> y * scale + offset` into the (linear) output layer.
    pub fn fold_output_affine(&mut self, scale: &[T], offset: &[T]) -> Result<()> {
        let last = self.layers.last_mut().expect("non-empty");
        if scale.len() != last.out_dim || offset.len() != last.out_dim {
            return Err(Error::Shape("output affine does not match the output dim".into()));
        }
        for (((row, b), &s), &m) in last.weights.chunks_exact_mut(last.in_dim).zip(last.bias.iter_mut()).zip(scale).zip(offset) {
            for w in row.iter_mut() {
                *w = *w * s;
            }
            *b = *b * s + m;
        }
        Ok(())
    }

    /// Same architecture and parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Regressor<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossless())).collect::<Vec<U>>();
        Regressor {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: conv(&l.weights),
                    bias: conv(&l.bias),
                    activation: l.activation,
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                })
                .collect(),
        }
    }
}
