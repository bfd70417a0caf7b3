use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, Activation};
use super::optim::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything that owns trainable parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in visiting order.
    fn flat_values(&self) -> Vec<f64> {
        self.parameters().iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// All gradients concatenated; missing gradients count as zero.
    fn flat_grads(&self) -> Vec<f64> {
        self.parameters()
            .iter()
            .flat_map(|p| match &p.grad {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.value.len()],
            })
            .collect()
    }

    /// Inverse of [`Module::flat_values`].
    fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::dim("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for p in self.parameters_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Convolution layer caching its input for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-normal weights, zero bias. Padding keeps the spatial size for odd
    /// kernels at stride 1.
    pub fn new<R: Rng>(name: &str, kernel: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (kernel * kernel * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn([kernel, kernel, cin, cout], |_, _, _, _| normal.sample(rng));
        Self::from_parts(name, w, Tensor::zeros([1, 1, 1, cout]), 1, kernel / 2)
    }

    /// All-zero weights and bias; the layer outputs exactly zero.
    pub fn zeros(name: &str, kernel: usize, cin: usize, cout: usize) -> Self {
        Self::from_parts(
            name,
            Tensor::zeros([kernel, kernel, cin, cout]),
            Tensor::zeros([1, 1, 1, cout]),
            1,
            kernel / 2,
        )
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            stride,
            padding,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[3]
    }

    /// Forward without caching.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight.value, &self.bias.value, self.stride, self.padding)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward before forward", self.weight.name)))?;
        let (dx, dw, db) = ops::conv2d_backward(&x, &self.weight.value, self.stride, self.padding, grad_out)?;
        self.weight.accumulate(&dw)?;
        self.bias.accumulate(&db)?;
        Ok(dx)
    }
}

impl Module for Conv2d {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Activation caching its output.
#[derive(Debug, Clone)]
pub struct ActivationLayer {
    kind: Activation,
    output: Option<Tensor>,
}

impl ActivationLayer {
    pub fn new(kind: Activation) -> Self {
        Self { kind, output: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = ops::activation(x, self.kind);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self
            .output
            .take()
            .ok_or_else(|| Error::State("activation backward before forward".into()))?;
        ops::activation_backward(&y, self.kind, grad_out)
    }
}

/// Two 3×3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    act1: ActivationLayer,
    pub conv2: Conv2d,
    act2: ActivationLayer,
}

impl ConvBlock {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), 3, cin, cout, rng),
            act1: ActivationLayer::new(Activation::Relu),
            conv2: Conv2d::new(&format!("{name}.conv2"), 3, cout, cout, rng),
            act2: ActivationLayer::new(Activation::Relu),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let h = self.act1.forward(&h);
        let h = self.conv2.forward(&h)?;
        Ok(self.act2.forward(&h))
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.act2.backward(g)?;
        let g = self.conv2.backward(&g)?;
        let g = self.act1.backward(&g)?;
        self.conv1.backward(&g)
    }
}

impl Module for ConvBlock {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.conv1.parameters();
        v.extend(self.conv2.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.conv1.parameters_mut();
        v.extend(self.conv2.parameters_mut());
        v
    }
}
