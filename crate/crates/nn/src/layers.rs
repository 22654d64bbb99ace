//! Parameterized building blocks. Each layer only remembers parameter
//! names; values live in a [`ParamStore`] so online and target copies can
//! share one architecture description.

use rand::Rng;

use crate::error::NnError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lit::<T>(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers fresh `name.weight` / `name.bias` drawn from
    /// `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        store.insert(
            format!("{name}.weight"),
            uniform_tensor(&[in_dim, out_dim], bound, rng),
            trainable,
        );
        store.insert(
            format!("{name}.bias"),
            uniform_tensor(&[out_dim], bound, rng),
            trainable,
        );
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let width = g.value(x).shape().last().copied().unwrap_or(0);
        if width != self.in_dim {
            return Err(NnError::Shape(format!(
                "{} expects width {}, got {width}",
                self.name, self.in_dim
            )));
        }
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }
}

/// Linear layers with rectified-linear activations between them and a
/// linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`; layers are named `name.l0`, `name.l1`, ...
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{name}.l{i}"), w[0], w[1], trainable, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var, NnError> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Same layers rooted at a different name prefix.
    pub fn renamed(&self, from: &str, to: &str) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    name: l.name.replacen(from, to, 1),
                    ..l.clone()
                })
                .collect(),
        }
    }
}

/// Square-kernel convolution without padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        // He-uniform keeps activations from vanishing through stacked ReLUs.
        let bound = (6.0 / fan_in as f64).sqrt();
        store.insert(
            format!("{name}.weight"),
            uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng),
            trainable,
        );
        store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]), trainable);
        Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// Spatial output size for an input of `size` pixels.
    pub fn output_size(&self, size: usize) -> usize {
        (size - self.kernel) / self.stride + 1
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(NnError::Shape(format!(
                "{} expects [n, {}, h, w], got {shape:?}",
                self.name, self.in_channels
            )));
        }
        if shape[2] < self.kernel || shape[3] < self.kernel {
            return Err(NnError::Shape(format!(
                "{} input {shape:?} smaller than kernel {}",
                self.name, self.kernel
            )));
        }
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        Ok(g.conv2d(x, w, b, self.stride))
    }
}

/// Affine layer normalization over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, trainable: bool) -> Self {
        store.insert(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), trainable);
        store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]), trainable);
        LayerNorm {
            name: name.to_string(),
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NnError> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        Ok(g.layer_norm(x, gamma, beta, lit(1e-5)))
    }
}
