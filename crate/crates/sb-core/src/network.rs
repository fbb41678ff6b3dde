//! A network is an ordered stack of layers sharing one mode per pass.

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Network {
        Network { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.forward_to(x, self.layers.len(), mode, rng)
    }

    /// Forward through layers [0, upto); `upto == len` runs the whole stack.
    /// Used by diagnostics to probe intermediate activations.
    pub fn forward_to(
        &mut self,
        x: &Tensor,
        upto: usize,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        if upto > self.layers.len() {
            return Err(Error::Lookup(format!(
                "layer index {upto} out of range for {} layers",
                self.layers.len()
            )));
        }
        let mut a = x.clone();
        for layer in &mut self.layers[..upto] {
            a = layer.forward(&a, mode, rng.as_deref_mut())?;
        }
        Ok(a)
    }

    /// Forward with only the stochastic layers in Train mode; deterministic
    /// layers (including BatchNorm) run in Eval. This isolates mask noise:
    /// the train/eval activation gap of a network with no stochastic layers
    /// is exactly zero under this pass, which is what the variance-shift
    /// diagnostic measures.
    pub fn forward_noise_only(
        &mut self,
        x: &Tensor,
        upto: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        if upto > self.layers.len() {
            return Err(Error::Lookup(format!(
                "layer index {upto} out of range for {} layers",
                self.layers.len()
            )));
        }
        let mut a = x.clone();
        for layer in &mut self.layers[..upto] {
            let mode = if layer.is_stochastic() { Mode::Train } else { Mode::Eval };
            a = layer.forward(&a, mode, rng.as_deref_mut())?;
        }
        Ok(a)
    }

    /// Backpropagate through the whole stack; layers must have cached a
    /// train-mode forward. Returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// All trainable (parameter, gradient) pairs in layer order.
    pub fn params(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    pub fn n_params(&mut self) -> usize {
        self.params().iter().map(|(p, _)| p.len()).sum()
    }

    pub fn layer(&self, idx: usize) -> Result<&Layer> {
        self.layers
            .get(idx)
            .ok_or_else(|| Error::Lookup(format!("no layer at index {idx}")))
    }
}
