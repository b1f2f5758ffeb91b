use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseMatrix, NumericsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }
}

/// One fully connected layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self, NumericsError> {
        if bias.len() != weight.rows() {
            return Err(NumericsError::DimensionMismatch {
                op: "layer bias",
                left: weight.shape(),
                right: (bias.len(), 1),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Applies the layer to every row of `x`.
    pub fn forward_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        let mut y = x.matmul_transposed(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(y)
    }
}

/// A chain of fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NumericsError> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NumericsError::DimensionMismatch {
                    op: "mlp chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Zero weights and biases for the given widths; ReLU between layers,
    /// linear output.
    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer {
                weight: DenseMatrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation: hidden_activation(k, widths.len() - 1),
            })
            .collect();
        Self { layers }
    }

    /// Uniform Glorot initialisation, biases zero.
    pub fn random<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weight: DenseMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-limit..limit)),
                    bias: vec![0.0; w[1]],
                    activation: hidden_activation(k, widths.len() - 1),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        let row = DenseMatrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward_rows(&row)?.into_data())
    }

    pub fn forward_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
        if x.cols() != self.in_dim() {
            return Err(NumericsError::DimensionMismatch {
                op: "mlp input",
                left: x.shape(),
                right: (self.in_dim(), self.out_dim()),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_rows(&h)?;
        }
        Ok(h)
    }
}

fn hidden_activation(k: usize, n_layers: usize) -> Activation {
    if k + 1 == n_layers {
        Activation::Linear
    } else {
        Activation::Relu
    }
}
