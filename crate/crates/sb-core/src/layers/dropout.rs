//! Dropout with expectation scaling at inference.
//!
//! Train multiplies activations by a fresh Bernoulli(keep_prob) mask per
//! element; Eval multiplies by keep_prob instead of inverse-scaling at train
//! time, so the two conventions meet at the same inference function.

use crate::error::{Error, Result};
use crate::rng::{bernoulli, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dropout {
    pub keep_prob: f64,
    /// Mask from the most recent train forward; doubles as the backward cache.
    pub last_mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(keep_prob: f64) -> Result<Dropout> {
        if !(0.0..=1.0).contains(&keep_prob) {
            return Err(Error::Domain(format!("dropout keep_prob {keep_prob} outside [0, 1]")));
        }
        Ok(Dropout { keep_prob, last_mask: None })
    }

    pub fn forward_train(&mut self, a: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mask = bernoulli(rng, a.shape(), self.keep_prob)?;
        self.forward_train_with_mask(a, mask)
    }

    /// Train forward with a caller-supplied mask; the hook the oracle and the
    /// gradient checks use to pin randomness.
    pub fn forward_train_with_mask(&mut self, a: &Tensor, mask: Tensor) -> Result<Tensor> {
        let out = a.hadamard(&mask)?;
        self.last_mask = Some(mask);
        Ok(out)
    }

    pub fn forward_eval(&self, a: &Tensor) -> Tensor {
        a.scale(self.keep_prob)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self
            .last_mask
            .as_ref()
            .ok_or_else(|| Error::State("dropout backward before train forward".into()))?;
        grad.hadamard(mask)
    }
}
