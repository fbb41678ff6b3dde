//! Plain affine layer: y = x·Wᵀ + b.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{column_sums, Mode};

#[derive(Debug, Clone)]
pub struct Linear {
    /// Weights, shape (out_features, in_features).
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Linear> {
        let (out, _inp) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let grad_weight = Tensor::zeros(weight.shape());
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Ok(Linear { weight, bias, grad_weight, grad_bias, input: None })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.matmul_nt(&self.weight)?;
        if let Some(b) = &self.bias {
            add_bias_rows(&mut y, b);
        }
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("linear backward before train forward".into()))?;
        self.grad_weight = grad.matmul_tn(x)?;
        if self.grad_bias.is_some() {
            self.grad_bias = Some(column_sums(grad)?);
        }
        grad.matmul(&self.weight)
    }
}

/// Adds a length-C bias to every row of a (batch, C) tensor.
pub(crate) fn add_bias_rows(y: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    for row in y.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias_passes_input_through() {
        let mut l = Linear::new(Tensor::identity(3), Some(Tensor::zeros(&[3]))).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let y = l.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_computed_row() {
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut l = Linear::new(w, None).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let y = l.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut l = Linear::new(Tensor::identity(2), None).unwrap();
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(l.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::Rng::new(3);
        let w = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let b = Tensor::from_vec(&[3], (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let c = Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();

        let mut layer = Linear::new(w.clone(), Some(b.clone())).unwrap();
        let out = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        let gx = layer.backward(&c).unwrap();

        let loss = |w: &Tensor, b: &Tensor, x: &Tensor| {
            let mut l = Linear::new(w.clone(), Some(b.clone())).unwrap();
            let y = l.forward(x, Mode::Eval).unwrap();
            y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let num_w = crate::gradcheck::numeric_gradient(&w, 1e-5, |t| loss(t, &b, &x));
        let num_b = crate::gradcheck::numeric_gradient(&b, 1e-5, |t| loss(&w, t, &x));
        let num_x = crate::gradcheck::numeric_gradient(&x, 1e-5, |t| loss(&w, &b, t));

        assert!(crate::gradcheck::max_rel_err(layer.grad_weight.data(), num_w.data()) < 1e-6);
        assert!(crate::gradcheck::max_rel_err(layer.grad_bias.as_ref().unwrap().data(), num_b.data()) < 1e-6);
        assert!(crate::gradcheck::max_rel_err(gx.data(), num_x.data()) < 1e-6);
    }
}
