//! Branch-decomposed linear layer with stochastic unit masking.
//!
//! The weight matrix is held as N branch matrices of identical shape. In
//! Train mode each (example, output unit, branch) triple draws an independent
//! keep/drop mask with the branch's keep probability, and the pre-activation
//! is the masked sum of branch outputs plus an unmasked shared bias:
//!
//! ```text
//! z[b,i] = sum_k m[b,i,k] * (x[b] W_k^T)[i] + bias[i]
//! ```
//!
//! In Eval mode no sampling happens; the branches fold into one matrix
//! weighted by their keep probabilities (sum_k p_k · W_k) and the layer
//! behaves as a plain linear map. No 1/p rescaling is applied during
//! training; the expectation is restored at fold time instead.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{column_sums, linear::add_bias_rows};

/// One batch of keep/drop masks, shape (batch, out_features, n_branches),
/// every value exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub values: Tensor,
}

impl MaskBatch {
    pub fn new(values: Tensor) -> Result<MaskBatch> {
        if values.ndim() != 3 {
            return Err(Error::Shape {
                op: "mask batch",
                lhs: values.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("mask values must be exactly 0 or 1".into()));
        }
        Ok(MaskBatch { values })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn branches(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, b: usize, unit: usize, branch: usize) -> f64 {
        let (n, u, k) = (self.batch(), self.units(), self.branches());
        assert!(b < n && unit < u && branch < k);
        self.values.data()[(b * u + unit) * k + branch]
    }
}

#[derive(Debug, Clone)]
pub struct SbLinear {
    /// N matrices, each (out_features, in_features).
    pub branches: Vec<Tensor>,
    /// Keep probability per branch, each in [0, 1].
    pub keep_probs: Vec<f64>,
    pub bias: Option<Tensor>,
    pub grad_branches: Vec<Tensor>,
    pub grad_bias: Option<Tensor>,
    /// Masks drawn by the most recent train forward (kept for backward and
    /// for the brute-force verifier to replay).
    pub last_masks: Option<MaskBatch>,
    input: Option<Tensor>,
}

impl SbLinear {
    pub fn new(branches: Vec<Tensor>, keep_probs: Vec<f64>, bias: Option<Tensor>) -> Result<SbLinear> {
        if branches.is_empty() {
            return Err(Error::Constraint("branch list must be non-empty".into()));
        }
        if branches.len() != keep_probs.len() {
            return Err(Error::Constraint(format!(
                "{} branches but {} keep probabilities",
                branches.len(),
                keep_probs.len()
            )));
        }
        let shape = branches[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape { op: "sb_linear branch", lhs: shape, rhs: vec![0, 0] });
        }
        for b in &branches[1..] {
            if b.shape() != shape {
                return Err(Error::Shape {
                    op: "sb_linear branch",
                    lhs: b.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        for &p in &keep_probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Domain(format!("keep probability {p} outside (0, 1]")));
            }
        }
        if let Some(b) = &bias {
            if b.shape() != [shape[0]] {
                return Err(Error::Shape {
                    op: "sb_linear bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![shape[0]],
                });
            }
        }
        let grad_branches = branches.iter().map(|b| Tensor::zeros(b.shape())).collect();
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Ok(SbLinear {
            branches,
            keep_probs,
            bias,
            grad_branches,
            grad_bias,
            last_masks: None,
            input: None,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn out_features(&self) -> usize {
        self.branches[0].shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.branches[0].shape()[1]
    }

    /// Draw one keep/drop mask per (example, unit, branch), row-major in that
    /// order, branch k using keep probability p_k.
    pub fn sample_masks(&self, rng: &mut Rng, batch: usize) -> MaskBatch {
        let (out, n) = (self.out_features(), self.n_branches());
        let mut values = Tensor::zeros(&[batch, out, n]);
        let data = values.data_mut();
        let mut idx = 0;
        for _ in 0..batch {
            for _ in 0..out {
                for k in 0..n {
                    data[idx] = if rng.next_f64() < self.keep_probs[k] { 1.0 } else { 0.0 };
                    idx += 1;
                }
            }
        }
        MaskBatch { values }
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let batch = x.dims2()?.0;
        let masks = self.sample_masks(rng, batch);
        self.forward_train_with_masks(x, masks)
    }

    /// Train forward under caller-supplied masks. This is the hook the
    /// brute-force verifier and the gradient checker use to pin randomness.
    pub fn forward_train_with_masks(&mut self, x: &Tensor, masks: MaskBatch) -> Result<Tensor> {
        let (batch, in_f) = x.dims2()?;
        if in_f != self.in_features() {
            return Err(Error::Shape {
                op: "sb_linear",
                lhs: x.shape().to_vec(),
                rhs: vec![self.out_features(), self.in_features()],
            });
        }
        let (out, n) = (self.out_features(), self.n_branches());
        if masks.values.shape() != [batch, out, n] {
            return Err(Error::Shape {
                op: "sb_linear masks",
                lhs: masks.values.shape().to_vec(),
                rhs: vec![batch, out, n],
            });
        }
        if masks.values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("mask values must be exactly 0 or 1".into()));
        }

        let mut z = Tensor::zeros(&[batch, out]);
        for (k, w) in self.branches.iter().enumerate() {
            let yk = x.matmul_nt(w)?; // (batch, out)
            let zd = z.data_mut();
            let yd = yk.data();
            let md = masks.values.data();
            for b in 0..batch {
                for i in 0..out {
                    zd[b * out + i] += md[(b * out + i) * n + k] * yd[b * out + i];
                }
            }
        }
        if let Some(bias) = &self.bias {
            add_bias_rows(&mut z, bias);
        }
        self.input = Some(x.clone());
        self.last_masks = Some(masks);
        Ok(z)
    }

    /// Fold the branches into a single matrix: sum_k p_k · W_k, accumulated
    /// in branch order.
    pub fn collapsed_weight(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.branches[0].shape());
        for (w, &p) in self.branches.iter().zip(&self.keep_probs) {
            let ad = acc.data_mut();
            for (a, &v) in ad.iter_mut().zip(w.data()) {
                *a += p * v;
            }
        }
        acc
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let folded = self.collapsed_weight();
        let mut y = x.matmul_nt(&folded)?;
        if let Some(bias) = &self.bias {
            add_bias_rows(&mut y, bias);
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("sb_linear backward before train forward".into()))?;
        let masks = self
            .last_masks
            .as_ref()
            .ok_or_else(|| Error::State("sb_linear backward without masks".into()))?;
        let (batch, out) = grad.dims2()?;
        if out != self.out_features() || batch != masks.batch() {
            return Err(Error::Shape {
                op: "sb_linear backward",
                lhs: grad.shape().to_vec(),
                rhs: vec![masks.batch(), self.out_features()],
            });
        }
        let n = self.n_branches();
        let mut gx = Tensor::zeros(x.shape());
        for k in 0..n {
            // Mask the upstream gradient for this branch.
            let mut gk = Tensor::zeros(&[batch, out]);
            {
                let gkd = gk.data_mut();
                let gd = grad.data();
                let md = masks.values.data();
                for b in 0..batch {
                    for i in 0..out {
                        gkd[b * out + i] = md[(b * out + i) * n + k] * gd[b * out + i];
                    }
                }
            }
            self.grad_branches[k] = gk.matmul_tn(x)?;
            let gxk = gk.matmul(&self.branches[k])?;
            gx = gx.add(&gxk)?;
        }
        if self.grad_bias.is_some() {
            // Bias sits outside the masks, so its gradient is the plain
            // column sum of the upstream gradient.
            self.grad_bias = Some(column_sums(grad)?);
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_branch_layer(bias: Option<Tensor>) -> SbLinear {
        let w1 = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w2 = Tensor::from_vec(&[1, 2], vec![-1.0, 0.5]).unwrap();
        SbLinear::new(vec![w1, w2], vec![0.5, 0.5], bias).unwrap()
    }

    fn forced(layer: &mut SbLinear, x: &Tensor, mask_bits: &[f64]) -> Tensor {
        let batch = x.shape()[0];
        let masks = MaskBatch::new(
            Tensor::from_vec(&[batch, layer.out_features(), layer.n_branches()], mask_bits.to_vec())
                .unwrap(),
        )
        .unwrap();
        layer.forward_train_with_masks(x, masks).unwrap()
    }

    #[test]
    fn forced_masks_select_branch_contributions() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut layer = two_branch_layer(None);
        // W1·x = 3, W2·x = -0.5
        assert_eq!(forced(&mut layer, &x, &[1.0, 1.0]).data(), &[2.5]);
        assert_eq!(forced(&mut layer, &x, &[1.0, 0.0]).data(), &[3.0]);
        assert_eq!(forced(&mut layer, &x, &[0.0, 1.0]).data(), &[-0.5]);
        assert_eq!(forced(&mut layer, &x, &[0.0, 0.0]).data(), &[0.0]);
    }

    #[test]
    fn bias_is_never_masked() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![10.0]).unwrap();
        let mut layer = two_branch_layer(Some(bias));
        // Both branches dropped: the bias still comes through.
        assert_eq!(forced(&mut layer, &x, &[0.0, 0.0]).data(), &[10.0]);
        assert_eq!(forced(&mut layer, &x, &[1.0, 1.0]).data(), &[12.5]);
    }

    #[test]
    fn eval_folds_branches_by_keep_probability() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let layer = two_branch_layer(None);
        let folded = layer.collapsed_weight();
        assert_eq!(folded.data(), &[0.0, 1.25]);
        let y = layer.forward_eval(&x).unwrap();
        assert_eq!(y.data(), &[1.25]);
    }

    #[test]
    fn single_branch_keep_one_matches_plain_linear() {
        let mut rng = crate::rng::Rng::new(5);
        let w = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let b = Tensor::from_vec(&[3], (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();

        let mut sb = SbLinear::new(vec![w.clone()], vec![1.0], Some(b.clone())).unwrap();
        let mut plain = crate::layers::Linear::new(w, Some(b)).unwrap();
        let mut mask_rng = rng.fork("masks");

        let y_train = sb.forward_train(&x, &mut mask_rng).unwrap();
        let y_eval = sb.forward_eval(&x).unwrap();
        let y_plain = plain
            .forward(&x, crate::layers::Mode::Eval)
            .unwrap();
        assert_eq!(y_train.data(), y_plain.data());
        assert_eq!(y_eval.data(), y_plain.data());
    }

    #[test]
    fn keep_probability_one_always_keeps() {
        let w1 = Tensor::filled(&[2, 2], 1.0);
        let w2 = Tensor::filled(&[2, 2], 1.0);
        let layer = SbLinear::new(vec![w1, w2], vec![1.0, 1.0], None).unwrap();
        let mut rng = crate::rng::Rng::new(9);
        let masks = layer.sample_masks(&mut rng, 4);
        assert!(masks.values.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn mask_sampling_is_reproducible_per_seed() {
        let layer = two_branch_layer(None);
        let a = layer.sample_masks(&mut crate::rng::Rng::new(42), 8);
        let b = layer.sample_masks(&mut crate::rng::Rng::new(42), 8);
        let c = layer.sample_masks(&mut crate::rng::Rng::new(43), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_fractional_mask_values() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut layer = two_branch_layer(None);
        let bad = MaskBatch {
            values: Tensor::from_vec(&[1, 1, 2], vec![0.5, 1.0]).unwrap(),
        };
        assert!(matches!(
            layer.forward_train_with_masks(&x, bad),
            Err(Error::Domain(_))
        ));
        assert!(MaskBatch::new(Tensor::from_vec(&[1, 1, 2], vec![0.5, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn constructor_validates_shapes_and_probs() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(SbLinear::new(vec![], vec![], None).is_err());
        assert!(SbLinear::new(vec![w.clone()], vec![0.5, 0.5], None).is_err());
        assert!(SbLinear::new(vec![w.clone(), Tensor::zeros(&[3, 2])], vec![0.5, 0.5], None)
            .is_err());
        assert!(SbLinear::new(vec![w.clone()], vec![1.5], None).is_err());
        assert!(SbLinear::new(vec![w.clone()], vec![0.0], None).is_err());
        assert!(SbLinear::new(vec![w.clone()], vec![0.5], Some(Tensor::zeros(&[3]))).is_err());
        assert!(SbLinear::new(vec![w], vec![0.5], Some(Tensor::zeros(&[2]))).is_ok());
    }

    #[test]
    fn backward_matches_finite_differences_under_forced_masks() {
        let mut rng = crate::rng::Rng::new(31);
        let n = 3;
        let (out, inp, batch) = (4, 5, 3);
        let branches: Vec<Tensor> = (0..n)
            .map(|_| {
                Tensor::from_vec(
                    &[out, inp],
                    (0..out * inp).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let bias =
            Tensor::from_vec(&[out], (0..out).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let x = Tensor::from_vec(
            &[batch, inp],
            (0..batch * inp).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let mask_vals: Vec<f64> = (0..batch * out * n)
            .map(|_| if rng.next_f64() < 0.6 { 1.0 } else { 0.0 })
            .collect();
        let masks = MaskBatch::new(Tensor::from_vec(&[batch, out, n], mask_vals).unwrap()).unwrap();
        let c: Vec<f64> = (0..batch * out).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss = |branches0: &[Tensor], bias0: &Tensor, x0: &Tensor| {
            let mut l =
                SbLinear::new(branches0.to_vec(), vec![0.5; n], Some(bias0.clone())).unwrap();
            let y = l.forward_train_with_masks(x0, masks.clone()).unwrap();
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut layer =
            SbLinear::new(branches.clone(), vec![0.5; n], Some(bias.clone())).unwrap();
        layer.forward_train_with_masks(&x, masks.clone()).unwrap();
        let gup = Tensor::from_vec(&[batch, out], c.clone()).unwrap();
        let gx = layer.backward(&gup).unwrap();

        for k in 0..n {
            let num = crate::gradcheck::numeric_gradient(&branches[k], 1e-5, |t| {
                let mut bs = branches.clone();
                bs[k] = t.clone();
                loss(&bs, &bias, &x)
            });
            assert!(
                crate::gradcheck::max_rel_err(layer.grad_branches[k].data(), num.data()) < 1e-6,
                "branch {k}"
            );
        }
        let num_bias = crate::gradcheck::numeric_gradient(&bias, 1e-5, |t| loss(&branches, t, &x));
        assert!(crate::gradcheck::max_rel_err(layer.grad_bias.as_ref().unwrap().data(), num_bias.data()) < 1e-6);
        let num_x = crate::gradcheck::numeric_gradient(&x, 1e-5, |t| loss(&branches, &bias, t));
        assert!(crate::gradcheck::max_rel_err(gx.data(), num_x.data()) < 1e-6);
    }

    #[test]
    fn dropped_branch_gets_zero_gradient() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut layer = two_branch_layer(None);
        forced(&mut layer, &x, &[1.0, 0.0]);
        layer.backward(&Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(layer.grad_branches[0].data(), &[1.0, 1.0]);
        assert_eq!(layer.grad_branches[1].data(), &[0.0, 0.0]);
    }
}
