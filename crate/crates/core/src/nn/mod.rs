//! Minimal trainable-network substrate: tensors, a recorded-operation tape,
//! dense and convolutional layers, the Adam optimizer and checkpoint I/O.

mod adam;
pub mod checkpoint;
mod graph;
pub mod layers;
pub mod linalg;
mod tensor;

pub use adam::Adam;
pub use graph::{ConvGeom, Graph, SparseRows, Var};
pub use layers::{dense_layer, first_layer, Activation, Block, Conv2d, Linear, Mlp};
pub use tensor::Tensor;

use rand::Rng;

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(name, Tensor::new(shape, data).expect("shape/product agree"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }
}

/// Free-standing list of parameters, e.g. inputs under a gradient check.
#[derive(Clone, Debug, Default)]
pub struct ParamList(pub Vec<Parameter>);

impl Module for ParamList {
    fn params(&self) -> Vec<&Parameter> {
        self.0.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.iter_mut().collect()
    }
}
