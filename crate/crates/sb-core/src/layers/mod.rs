//! Layer definitions with explicit forward/backward passes.
//!
//! Every layer follows the same protocol: `forward(x, mode, rng)` returns the
//! output and, in `Train` mode, caches whatever the matching `backward` needs;
//! `backward(grad)` consumes the cache and returns the gradient w.r.t. the
//! layer input while writing parameter gradients into the layer's `grad_*`
//! fields (overwritten on every call, valid for the most recent batch).
//!
//! Mode contract: stochastic layers sample masks only in `Train`; `Eval` is
//! deterministic, consumes no randomness, and mutates nothing, so repeated
//! eval forwards are bitwise identical. `backward` requires that the most
//! recent forward ran in `Train` mode.

mod activation;
mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod sb_conv;
mod sb_linear;

pub use activation::{Flatten, Relu, Tanh};
pub use batchnorm::BatchNorm;
pub use conv::{conv_output_hw, Conv2d};
pub use dropout::Dropout;
pub use linear::Linear;
pub use sb_conv::SbConv2d;
pub use sb_linear::{MaskBatch, SbLinear};

pub(crate) use linear::add_bias_rows;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Closed set of layer kinds; enum dispatch keeps the network serializable
/// and cloneable without trait objects.
#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    SbLinear(SbLinear),
    Conv2d(Conv2d),
    SbConv2d(SbConv2d),
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    Relu(Relu),
    Tanh(Tanh),
    Flatten(Flatten),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x, mode),
            Layer::SbLinear(l) => match mode {
                Mode::Train => l.forward_train(x, need_rng(rng, "branch-masked linear")?),
                Mode::Eval => l.forward_eval(x),
            },
            Layer::Conv2d(l) => l.forward(x, mode),
            Layer::SbConv2d(l) => match mode {
                Mode::Train => l.forward_train(x, need_rng(rng, "branch-masked conv")?),
                Mode::Eval => l.forward_eval(x),
            },
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Dropout(l) => match mode {
                Mode::Train => l.forward_train(x, need_rng(rng, "dropout")?),
                Mode::Eval => Ok(l.forward_eval(x)),
            },
            Layer::Relu(l) => Ok(l.forward(x, mode)),
            Layer::Tanh(l) => Ok(l.forward(x, mode)),
            Layer::Flatten(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::SbLinear(l) => l.backward(grad),
            Layer::Conv2d(l) => l.backward(grad),
            Layer::SbConv2d(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Tanh(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
        }
    }

    /// Trainable (parameter, gradient) pairs in a stable documented order:
    /// weights/branches first, then bias; BatchNorm lists gamma then beta.
    pub fn params(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        match self {
            Layer::Linear(l) => {
                let mut ps = vec![(&mut l.weight, &l.grad_weight)];
                if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_ref()) {
                    ps.push((b, g));
                }
                ps
            }
            Layer::SbLinear(l) => {
                let mut ps: Vec<(&mut Tensor, &Tensor)> =
                    l.branches.iter_mut().zip(l.grad_branches.iter()).collect();
                if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_ref()) {
                    ps.push((b, g));
                }
                ps
            }
            Layer::Conv2d(l) => {
                let mut ps = vec![(&mut l.weight, &l.grad_weight)];
                if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_ref()) {
                    ps.push((b, g));
                }
                ps
            }
            Layer::SbConv2d(l) => {
                let mut ps: Vec<(&mut Tensor, &Tensor)> =
                    l.branches.iter_mut().zip(l.grad_branches.iter()).collect();
                if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_ref()) {
                    ps.push((b, g));
                }
                ps
            }
            Layer::BatchNorm(l) => {
                vec![(&mut l.gamma, &l.grad_gamma), (&mut l.beta, &l.grad_beta)]
            }
            Layer::Dropout(_) | Layer::Relu(_) | Layer::Tanh(_) | Layer::Flatten(_) => vec![],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::SbLinear(_) => "sb_linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::SbConv2d(_) => "sb_conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dropout(_) => "dropout",
            Layer::Relu(_) => "relu",
            Layer::Tanh(_) => "tanh",
            Layer::Flatten(_) => "flatten",
        }
    }

    /// True for layers that consume randomness in Train mode.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Layer::SbLinear(_) | Layer::SbConv2d(_) | Layer::Dropout(_))
    }
}

fn need_rng<'a>(rng: Option<&'a mut Rng>, what: &str) -> Result<&'a mut Rng> {
    rng.ok_or_else(|| Error::State(format!("{what} needs an rng for train-mode masks")))
}

/// Gradient of a loss w.r.t. a bias: column sums of the output gradient.
pub(crate) fn column_sums(grad: &Tensor) -> Result<Tensor> {
    let (b, c) = grad.dims2()?;
    let mut out = Tensor::zeros(&[c]);
    for i in 0..b {
        for j in 0..c {
            out.data_mut()[j] += grad.data()[i * c + j];
        }
    }
    Ok(out)
}
