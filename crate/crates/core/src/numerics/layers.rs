use rand::Rng;

use super::ops::{linear_backward, linear_forward, relu_backward_inplace, relu_inplace};
use super::param::ParamBlock;
use super::rng::DrpRng;
use super::tensor::Tensor;
use crate::error::Result;

/// Trainable affine layer, weights `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(name: &str, inputs: usize, outputs: usize, rng: &mut DrpRng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear::from_parts(
            name,
            Tensor::from_vec(&[outputs, inputs], data).expect("finite init"),
            Tensor::zeros(&[outputs]),
        )
    }

    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear::from_parts(
            name,
            Tensor::zeros(&[outputs, inputs]),
            Tensor::zeros(&[outputs]),
        )
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Tensor) -> Self {
        Linear {
            weight: ParamBlock::new(format!("{name}.weight"), weight),
            bias: ParamBlock::new(format!("{name}.bias"), bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        linear_backward(x, &mut self.weight, &mut self.bias, grad_out)
    }

    pub fn params_mut(&mut self) -> [&mut ParamBlock; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&ParamBlock; 2] {
        [&self.weight, &self.bias]
    }
}

/// Stack of linear layers with ReLU between them (and optionally after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

/// Activations kept for the backward pass: the input followed by each layer's output.
#[derive(Clone, Debug)]
pub struct MlpCache {
    activations: Vec<Tensor>,
}

impl Mlp {
    pub fn glorot(name: &str, widths: &[usize], relu_output: bool, rng: &mut DrpRng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::glorot(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            relu_output,
        }
    }

    fn relu_after(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_output
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(activations.last().expect("input present"))?;
            if self.relu_after(i) {
                relu_inplace(&mut y);
            }
            activations.push(y);
        }
        let out = activations.last().cloned().expect("non-empty");
        Ok((out, MlpCache { activations }))
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Tensor) -> Tensor {
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if self.relu_after(i) {
                relu_backward_inplace(&cache.activations[i + 1], &mut grad);
            }
            grad = self.layers[i].backward(&cache.activations[i], &grad);
        }
        grad
    }

    pub fn params(&self) -> Vec<&ParamBlock> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}
