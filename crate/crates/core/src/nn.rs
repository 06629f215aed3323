//! Fully-connected layers shared by the backbone, the classifier head and
//! the embedding network.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of [`Linear`] layers with ReLU between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

/// Graph handles for the parameters of an [`Mlp`], `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Parameter handles in the same order as [`Mlp::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl Mlp {
    /// `widths` lists the input dimension followed by every layer's output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Mismatch {
                    what: "layer width",
                    expected: pair[0].output_dim(),
                    found: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.numel() != l.output_dim() {
                return Err(Error::Mismatch {
                    what: "bias length",
                    expected: l.output_dim(),
                    found: l.bias.numel(),
                });
            }
        }
        Ok(Self { layers })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "MLP widths must list an input and at least one positive layer width, got {widths:?}"
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Input dimension followed by each layer's output dimension.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Linear::output_dim))
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Places the parameters on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.weight.clone(), trainable),
                    g.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        BoundMlp { layers }
    }

    /// Forward pass of an `[m×in]` batch.
    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::Mismatch {
                what: "input dimension",
                expected: self.input_dim(),
                found: cols,
            });
        }
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_row_bias(z, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
