//! Constructors and transformations between plain and branch-decomposed
//! layers: pretrained expansion, random splitting, exact collapse, and the
//! constrained forms that reduce the stochastic-branch scheme to Dropout
//! (shared unit mask) and DropConnect (one branch per input).

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::layers::{SbConv2d, SbLinear};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum BranchInit {
    RandomSplit,
    PretrainedExpand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub n_branches: usize,
    pub keep_probs: Vec<f64>,
    pub init: BranchInit,
}

impl BranchSpec {
    pub fn uniform(n_branches: usize, keep_prob: f64, init: BranchInit) -> BranchSpec {
        BranchSpec { n_branches, keep_probs: vec![keep_prob; n_branches], init }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_branches < 1 {
            return Err(Error::Constraint("need at least one branch".into()));
        }
        if self.keep_probs.len() != self.n_branches {
            return Err(Error::Constraint(format!(
                "{} keep probabilities for {} branches",
                self.keep_probs.len(),
                self.n_branches
            )));
        }
        for &p in &self.keep_probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Domain(format!("keep probability {p} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Branch tensors W_k = W / (N·p_k). Folding them back by keep probability
/// gives sum_k p_k·W/(N·p_k) = W, so a freshly expanded layer collapses to
/// the source weights exactly.
pub fn expand_tensor(w: &Tensor, spec: &BranchSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    if spec.init != BranchInit::PretrainedExpand {
        return Err(Error::Constraint("spec.init must be PretrainedExpand".into()));
    }
    let n = spec.n_branches as f64;
    Ok(spec.keep_probs.iter().map(|&p| w.scale(1.0 / (n * p))).collect())
}

/// Branches that sum to W exactly: the first N-1 are uniform draws on
/// [-s, s] with s = max|W|/N, the last is the residual W - sum(others).
pub fn split_tensor(w: &Tensor, spec: &BranchSpec, rng: &mut Rng) -> Result<Vec<Tensor>> {
    spec.validate()?;
    if spec.init != BranchInit::RandomSplit {
        return Err(Error::Constraint("spec.init must be RandomSplit".into()));
    }
    let n = spec.n_branches;
    if n == 1 {
        return Ok(vec![w.clone()]);
    }
    let s = w.max_abs() / n as f64;
    let mut branches = Vec::with_capacity(n);
    let mut residual = w.clone();
    for _ in 0..n - 1 {
        let b = Tensor::from_vec(
            w.shape(),
            (0..w.len()).map(|_| rng.uniform(-s, s)).collect(),
        )?;
        residual = residual.sub(&b)?;
        branches.push(b);
    }
    branches.push(residual);
    Ok(branches)
}

pub fn expand_pretrained(w: &Tensor, spec: &BranchSpec, bias: Option<Tensor>) -> Result<SbLinear> {
    SbLinear::new(expand_tensor(w, spec)?, spec.keep_probs.clone(), bias)
}

pub fn random_split(
    w: &Tensor,
    spec: &BranchSpec,
    bias: Option<Tensor>,
    rng: &mut Rng,
) -> Result<SbLinear> {
    SbLinear::new(split_tensor(w, spec, rng)?, spec.keep_probs.clone(), bias)
}

pub fn random_split_conv(
    w: &Tensor,
    spec: &BranchSpec,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
    rng: &mut Rng,
) -> Result<SbConv2d> {
    SbConv2d::new(split_tensor(w, spec, rng)?, spec.keep_probs.clone(), bias, stride, pad)
}

/// The folded inference weights: w_ij = sum_k p_k·w_k_ij. The layer is
/// not consumed or changed.
pub fn collapse(layer: &SbLinear) -> Tensor {
    layer.collapsed_weight()
}

pub fn collapse_conv(layer: &SbConv2d) -> Tensor {
    layer.collapsed_weight()
}

/// A branch layer constrained to one shared mask per output unit: every
/// branch of unit i lives or dies together, so the pre-activation is
/// m_i·(sum_k (W_k x)_i + bias_i). With the branch sum folded into a single
/// matrix this is literally a plain linear layer followed by unit dropout,
/// which is the point: the constrained scheme and Dropout coincide.
#[derive(Debug, Clone)]
pub struct GroupMasked {
    /// Exact elementwise sum of the branch matrices, in branch order.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub keep_prob: f64,
    pub last_mask: Option<Tensor>,
}

impl GroupMasked {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let batch = x.dims2()?.0;
        let mask = crate::rng::bernoulli(rng, &[batch, self.out_features()], self.keep_prob)?;
        self.forward_train_with_mask(x, mask)
    }

    pub fn forward_train_with_mask(&mut self, x: &Tensor, mask: Tensor) -> Result<Tensor> {
        let z = self.affine(x)?;
        if mask.shape() != z.shape() {
            return Err(Error::Shape {
                op: "group mask",
                lhs: mask.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        let out = z.hadamard(&mask)?;
        self.last_mask = Some(mask);
        Ok(out)
    }

    /// Expectation scaling, identical to a Dropout layer's eval pass applied
    /// after the folded linear map.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.affine(x)?.scale(self.keep_prob))
    }

    fn affine(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul_nt(&self.weight)?;
        if let Some(b) = &self.bias {
            crate::layers::add_bias_rows(&mut z, b);
        }
        Ok(z)
    }
}

/// Constrain a branch layer to group masking. Requires all branches to share
/// one keep probability, since a single mask per unit governs them all.
pub fn as_group_masked(layer: &SbLinear) -> Result<GroupMasked> {
    let p = layer.keep_probs[0];
    if layer.keep_probs.iter().any(|&q| q != p) {
        return Err(Error::Constraint(format!(
            "group masking needs equal keep probabilities, got {:?}",
            layer.keep_probs
        )));
    }
    let mut weight = Tensor::zeros(layer.branches[0].shape());
    for b in &layer.branches {
        weight = weight.add(b)?;
    }
    Ok(GroupMasked { weight, bias: layer.bias.clone(), keep_prob: p, last_mask: None })
}

/// One-to-one branching: branch j carries only column j of W
/// (w_k_ij = w_ij if k == j, else 0), so the per-(unit, branch) masks act as
/// per-connection masks and the train forward equals (M ⊙ W)·x.
pub fn as_dropconnect(w: &Tensor, keep_prob: f64) -> Result<SbLinear> {
    let (out, inp) = w.dims2()?;
    let mut branches = vec![Tensor::zeros(&[out, inp]); inp];
    for i in 0..out {
        for j in 0..inp {
            branches[j].data_mut()[i * inp + j] = w.data()[i * inp + j];
        }
    }
    SbLinear::new(branches, vec![keep_prob; inp], None)
}

/// Probability that every branch of a unit is dropped in one draw:
/// product of (1 - p_k), accumulated left to right.
pub fn turn_off_probability(keep_probs: &[f64]) -> f64 {
    keep_probs.iter().fold(1.0, |acc, &p| acc * (1.0 - p))
}

/// Number of distinct mask assignments over n_units units with n_branches
/// branches each: 2^(units·branches), exact.
pub fn ensemble_size(n_units: usize, n_branches: usize) -> Result<BigUint> {
    if n_units == 0 || n_branches == 0 {
        return Err(Error::Domain("ensemble size needs positive unit and branch counts".into()));
    }
    Ok(BigUint::from(1u8) << (n_units * n_branches))
}

/// log2 of the ensemble size, which is just the mask-bit count.
pub fn ensemble_log2(n_units: usize, n_branches: usize) -> Result<u64> {
    if n_units == 0 || n_branches == 0 {
        return Err(Error::Domain("ensemble size needs positive unit and branch counts".into()));
    }
    Ok((n_units as u64) * (n_branches as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Dropout, Linear, MaskBatch, Mode, Relu, Tanh};

    fn spec(n: usize, p: f64, init: BranchInit) -> BranchSpec {
        BranchSpec::uniform(n, p, init)
    }

    #[test]
    fn expansion_divides_by_n_times_p() {
        let w = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let layer =
            expand_pretrained(&w, &spec(2, 0.5, BranchInit::PretrainedExpand), None).unwrap();
        // 2 / (2·0.5) = 2 for both branches
        assert_eq!(layer.branches[0].data(), &[2.0]);
        assert_eq!(layer.branches[1].data(), &[2.0]);
    }

    #[test]
    fn single_branch_keep_one_expansion_is_identity() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let layer =
            expand_pretrained(&w, &spec(1, 1.0, BranchInit::PretrainedExpand), None).unwrap();
        assert_eq!(layer.branches[0], w);
    }

    #[test]
    fn expand_collapse_round_trip_within_1e12() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let n = 1 + (trial % 5);
            let probs: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 1.0)).collect();
            let sp = BranchSpec {
                n_branches: n,
                keep_probs: probs,
                init: BranchInit::PretrainedExpand,
            };
            let w = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect())
                .unwrap();
            let layer = expand_pretrained(&w, &sp, None).unwrap();
            let back = collapse(&layer);
            for (a, b) in back.data().iter().zip(w.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn expansion_rejects_zero_keep_probability() {
        let w = Tensor::zeros(&[1, 1]);
        let sp = BranchSpec {
            n_branches: 2,
            keep_probs: vec![0.5, 0.0],
            init: BranchInit::PretrainedExpand,
        };
        assert!(matches!(expand_tensor(&w, &sp), Err(Error::Domain(_))));
    }

    #[test]
    fn split_conserves_the_sum_exactly() {
        let mut rng = Rng::new(4);
        let w = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        for n in [1, 2, 5, 10] {
            let branches =
                split_tensor(&w, &spec(n, 0.5, BranchInit::RandomSplit), &mut rng).unwrap();
            assert_eq!(branches.len(), n);
            let mut sum = Tensor::zeros(w.shape());
            for b in &branches {
                sum = sum.add(b).unwrap();
            }
            for (a, b) in sum.data().iter().zip(w.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_depends_on_the_seed() {
        let w = Tensor::filled(&[2, 2], 1.0);
        let sp = spec(3, 0.5, BranchInit::RandomSplit);
        let a = split_tensor(&w, &sp, &mut Rng::new(1)).unwrap();
        let b = split_tensor(&w, &sp, &mut Rng::new(2)).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
        let c = split_tensor(&w, &sp, &mut Rng::new(1)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn collapse_hand_example() {
        let w1 = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w2 = Tensor::from_vec(&[1, 2], vec![-1.0, 0.5]).unwrap();
        let layer = SbLinear::new(vec![w1, w2], vec![0.5, 0.5], None).unwrap();
        assert_eq!(collapse(&layer).data(), &[0.0, 1.25]);
    }

    #[test]
    fn group_masked_requires_equal_probs() {
        let layer = SbLinear::new(
            vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])],
            vec![0.5, 0.6],
            None,
        )
        .unwrap();
        assert!(matches!(as_group_masked(&layer), Err(Error::Constraint(_))));
    }

    #[test]
    fn group_mask_annihilates_a_unit() {
        let layer = SbLinear::new(vec![Tensor::filled(&[2, 2], 1.0)], vec![0.5], None).unwrap();
        let mut gm = as_group_masked(&layer).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let mask = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = gm.forward_train_with_mask(&x, mask).unwrap();
        assert_eq!(y.data(), &[0.0, 7.0]);
    }

    #[test]
    fn group_masked_equals_linear_then_dropout_exactly() {
        // The folded path and the Dropout path share every arithmetic op, so
        // agreement is bitwise, both pre-activation and after relu/tanh.
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = 2 + rng.index(3);
            let (out, inp, batch) = (1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(3));
            let branches: Vec<Tensor> = (0..n)
                .map(|_| {
                    Tensor::from_vec(
                        &[out, inp],
                        (0..out * inp).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let bias = Tensor::from_vec(&[out], (0..out).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let sb = SbLinear::new(branches, vec![0.5; n], Some(bias)).unwrap();
            let mut gm = as_group_masked(&sb).unwrap();
            let x = Tensor::from_vec(
                &[batch, inp],
                (0..batch * inp).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            )
            .unwrap();
            let mask = crate::rng::bernoulli(&mut rng, &[batch, out], 0.5).unwrap();

            let masked = gm.forward_train_with_mask(&x, mask.clone()).unwrap();

            let mut lin = Linear::new(gm.weight.clone(), gm.bias.clone()).unwrap();
            let mut dropout = Dropout::new(0.5).unwrap();
            let z = lin.forward(&x, Mode::Eval).unwrap();
            let dropped = dropout.forward_train_with_mask(&z, mask.clone()).unwrap();
            assert_eq!(masked, dropped);

            // After a zero-fixing nonlinearity the two orderings coincide too.
            let mut relu_a = Relu::new();
            let mut relu_b = Relu::new();
            let a = relu_a.forward(&masked, Mode::Eval);
            let b = dropout
                .forward_train_with_mask(&relu_b.forward(&z, Mode::Eval), mask.clone())
                .unwrap();
            assert_eq!(a, b);
            let mut tanh_a = Tanh::new();
            let mut tanh_b = Tanh::new();
            let a = tanh_a.forward(&masked, Mode::Eval);
            let b = dropout
                .forward_train_with_mask(&tanh_b.forward(&z, Mode::Eval), mask)
                .unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_masked_keep_one_is_the_plain_layer() {
        let sb = SbLinear::new(
            vec![Tensor::filled(&[2, 2], 0.25); 4],
            vec![1.0; 4],
            None,
        )
        .unwrap();
        let mut gm = as_group_masked(&sb).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let mut rng = Rng::new(3);
        let train = gm.forward_train(&x, &mut rng).unwrap();
        let eval = gm.forward_eval(&x).unwrap();
        let mut plain = Linear::new(gm.weight.clone(), None).unwrap();
        let y = plain.forward(&x, Mode::Eval).unwrap();
        assert_eq!(train, y);
        assert_eq!(eval, y);
    }

    #[test]
    fn dropconnect_hand_example() {
        // W=[[1,2]], x=[1,1], connection masks (1,0): only w_11 survives.
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let mut layer = as_dropconnect(&w, 0.5).unwrap();
        assert_eq!(layer.n_branches(), 2);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let masks =
            MaskBatch::new(Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let y = layer.forward_train_with_masks(&x, masks).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn dropconnect_collapse_scales_by_keep_prob() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let layer = as_dropconnect(&w, 0.25).unwrap();
        let folded = collapse(&layer);
        assert_eq!(folded, w.scale(0.25));
    }

    #[test]
    fn dropconnect_equals_masked_weight_product() {
        let mut rng = Rng::new(50);
        for _ in 0..50 {
            let (out, inp, batch) = (1 + rng.index(4), 1 + rng.index(5), 1 + rng.index(3));
            let w = Tensor::from_vec(
                &[out, inp],
                (0..out * inp).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let mut layer = as_dropconnect(&w, 0.5).unwrap();
            let x = Tensor::from_vec(
                &[batch, inp],
                (0..batch * inp).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let bits = crate::rng::bernoulli(&mut rng, &[batch, out, inp], 0.5).unwrap();
            let masks = MaskBatch::new(bits.clone()).unwrap();
            let y = layer.forward_train_with_masks(&x, masks).unwrap();
            // reference: y[b,i] = sum_j bits[b,i,j]·w[i,j]·x[b,j]
            for b in 0..batch {
                for i in 0..out {
                    let mut want = 0.0;
                    for j in 0..inp {
                        want += bits.data()[(b * out + i) * inp + j]
                            * w.data()[i * inp + j]
                            * x.data()[b * inp + j];
                    }
                    let got = y.data()[b * out + i];
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn turn_off_probability_values() {
        assert_eq!(turn_off_probability(&[0.5; 10]), 0.0009765625);
        assert_eq!(turn_off_probability(&[0.3, 1.0, 0.7]), 0.0);
        assert_eq!(turn_off_probability(&[0.5]), 0.5);
    }

    #[test]
    fn turn_off_probability_matches_power_form() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let p = rng.uniform(0.01, 1.0);
            let n = 1 + rng.index(12);
            let product = turn_off_probability(&vec![p; n]);
            // same left-to-right accumulation as the implementation contract
            let power = (0..n).fold(1.0, |acc, _| acc * (1.0 - p));
            assert_eq!(product, power);
        }
    }

    #[test]
    fn ensemble_size_values() {
        assert_eq!(ensemble_size(1, 1).unwrap(), BigUint::from(2u8));
        assert_eq!(ensemble_size(2, 2).unwrap(), BigUint::from(16u8));
        assert_eq!(ensemble_log2(1024, 10).unwrap(), 10240);
        assert_eq!(ensemble_size(1024, 10).unwrap().bits(), 10241);
        assert!(ensemble_size(0, 3).is_err());
    }
}
