//! Elementwise nonlinearities and shape plumbing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mode;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    input: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu::default()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        y
    }

    /// Passes gradient where input > 0; the tie at exactly 0 passes 0.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("relu backward before train forward".into()))?;
        x.zip_map(grad, |xi, g| if xi > 0.0 { g } else { 0.0 })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh {
    output: Option<Tensor>,
}

impl Tanh {
    pub fn new() -> Tanh {
        Tanh::default()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = x.map(f64::tanh);
        if mode == Mode::Train {
            self.output = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self
            .output
            .as_ref()
            .ok_or_else(|| Error::State("tanh backward before train forward".into()))?;
        y.zip_map(grad, |yi, g| g * (1.0 - yi * yi))
    }
}

/// Collapses all non-batch dimensions: (b, d1, d2, ...) -> (b, d1·d2·...).
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Flatten {
        Flatten::default()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.ndim() < 2 {
            return Err(Error::Shape { op: "flatten", lhs: x.shape().to_vec(), rhs: vec![0, 0] });
        }
        let b = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        if mode == Mode::Train {
            self.input_shape = Some(x.shape().to_vec());
        }
        x.reshaped(&[b, rest])
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| Error::State("flatten backward before train forward".into()))?;
        grad.reshaped(shape)
    }
}
