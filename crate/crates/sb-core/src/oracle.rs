//! Independent brute-force verifiers for the branch semantics.
//!
//! Everything here recomputes expected values from first principles with
//! plain loops over the weight arrays; layer forward implementations are
//! invoked only as the object under test. The central check: averaging a
//! branch layer's forced-mask output over every one of the 2^(units·N)
//! mask assignments, weighted by assignment probability, must equal the
//! folded eval forward.

use crate::branch::{as_dropconnect, as_group_masked};
use crate::error::{Error, Result};
use crate::layers::{Dropout, Linear, MaskBatch, Mode, Relu, SbLinear, Tanh};
use crate::rng::{bernoulli, Rng};
use crate::tensor::Tensor;

/// Enumeration guard: at most 2^20 ensemble members.
pub const MAX_ENUM_BITS: usize = 20;

/// Deviation above this counts as a reduction mismatch.
pub const REDUCTION_TOL: f64 = 1e-12;

/// Kahan compensated accumulator; error stays O(ulp) regardless of how many
/// terms the enumeration adds.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum
    }
}

/// One ensemble member: a full (unit, branch) keep/drop assignment and its
/// probability under independent Bernoulli masks. Bit for (unit i, branch k)
/// lives at position i·N + k.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAssignment {
    pub bits: Vec<bool>,
    pub probability: f64,
}

/// The `index`-th assignment (little-endian bit order over positions).
pub fn nth_assignment(index: u64, n_units: usize, keep_probs: &[f64]) -> MaskAssignment {
    let n = keep_probs.len();
    let total = n_units * n;
    let mut bits = Vec::with_capacity(total);
    let mut probability = 1.0;
    for pos in 0..total {
        let on = index >> pos & 1 == 1;
        let p = keep_probs[pos % n];
        probability *= if on { p } else { 1.0 - p };
        bits.push(on);
    }
    MaskAssignment { bits, probability }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveReport {
    /// Probability-weighted mean pre-activation, one entry per output unit.
    pub expectation: Tensor,
    /// Total probability over all members; 1 within 1e-12 by construction.
    pub probability_mass: f64,
    pub members: u64,
}

/// Per-branch unit pre-activations a[i][k] = sum_j w_k[i,j]·x[j], by loops.
fn branch_activations(layer: &SbLinear, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let d = layer.in_features();
    if x.ndim() != 1 || x.len() != d {
        return Err(Error::Shape {
            op: "oracle input",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let d_hat = layer.out_features();
    let mut a = vec![vec![0.0; layer.n_branches()]; d_hat];
    for (k, w) in layer.branches.iter().enumerate() {
        for i in 0..d_hat {
            let mut s = 0.0;
            for j in 0..d {
                s += w.data()[i * d + j] * x.data()[j];
            }
            a[i][k] = s;
        }
    }
    Ok(a)
}

/// Exact ensemble expectation of the pre-activation for a single input:
/// sum over all 2^(units·N) assignments of probability × forced-mask output.
pub fn exhaustive_expectation(layer: &SbLinear, x: &Tensor) -> Result<ExhaustiveReport> {
    let d_hat = layer.out_features();
    let n = layer.n_branches();
    let bits = d_hat * n;
    if bits > MAX_ENUM_BITS {
        return Err(Error::TooLarge(format!(
            "{d_hat} units x {n} branches = {bits} mask bits exceeds the {MAX_ENUM_BITS}-bit \
             enumeration guard; use monte_carlo_expectation instead"
        )));
    }
    let a = branch_activations(layer, x)?;
    let probs = &layer.keep_probs;
    let members = 1u64 << bits;

    // compensated sums: a million-term plain accumulation can drift past
    // the 1e-12 mass invariant
    let mut expectation = vec![KahanSum::default(); d_hat];
    let mut mass = KahanSum::default();
    for member in 0..members {
        let mut probability = 1.0;
        for pos in 0..bits {
            let p = probs[pos % n];
            probability *= if member >> pos & 1 == 1 { p } else { 1.0 - p };
        }
        mass.add(probability);
        for (i, ai) in a.iter().enumerate() {
            let mut z = 0.0;
            for (k, aik) in ai.iter().enumerate() {
                if member >> (i * n + k) & 1 == 1 {
                    z += aik;
                }
            }
            expectation[i].add(probability * z);
        }
    }
    let mass = mass.value();
    let mut expectation: Vec<f64> = expectation.into_iter().map(KahanSum::value).collect();
    if let Some(b) = &layer.bias {
        // the bias rides along unmasked in every member: E[z + b] = E[z] + b·mass
        for (e, bv) in expectation.iter_mut().zip(b.data()) {
            *e += bv * mass;
        }
    }
    Ok(ExhaustiveReport {
        expectation: Tensor::from_vec(&[d_hat], expectation)?,
        probability_mass: mass,
        members,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub mean: Tensor,
    /// Per-unit standard error sqrt(s²/n), s² the unbiased sample variance.
    pub standard_error: Tensor,
    pub samples: usize,
}

/// Sampled ensemble expectation: `n_samples` independent forced-mask
/// forwards, masks drawn here, output recomputed by loops.
pub fn monte_carlo_expectation(
    layer: &SbLinear,
    x: &Tensor,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<MonteCarloReport> {
    if n_samples < 2 {
        return Err(Error::Domain(format!(
            "standard error needs at least 2 samples, got {n_samples}"
        )));
    }
    let a = branch_activations(layer, x)?;
    let d_hat = layer.out_features();
    let n = layer.n_branches();

    let mut count = 0u64;
    let mut mean = vec![0.0; d_hat];
    let mut m2 = vec![0.0; d_hat];
    for _ in 0..n_samples {
        count += 1;
        for i in 0..d_hat {
            let mut z = match &layer.bias {
                Some(b) => b.data()[i],
                None => 0.0,
            };
            for k in 0..n {
                if rng.next_f64() < layer.keep_probs[k] {
                    z += a[i][k];
                }
            }
            let delta = z - mean[i];
            mean[i] += delta / count as f64;
            m2[i] += delta * (z - mean[i]);
        }
    }
    let se: Vec<f64> = m2
        .iter()
        .map(|&m| (m / (count - 1) as f64 / count as f64).sqrt())
        .collect();
    Ok(MonteCarloReport {
        mean: Tensor::from_vec(&[d_hat], mean)?,
        standard_error: Tensor::from_vec(&[d_hat], se)?,
        samples: n_samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    /// Elementwise comparisons performed.
    pub checks: usize,
    /// Comparisons whose absolute deviation exceeded the tolerance.
    pub mismatches: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl ReductionReport {
    fn new() -> ReductionReport {
        ReductionReport { checks: 0, mismatches: 0, max_deviation: 0.0, tolerance: REDUCTION_TOL }
    }

    fn compare(&mut self, got: &[f64], want: &[f64]) {
        for (g, w) in got.iter().zip(want) {
            let dev = (g - w).abs();
            self.checks += 1;
            self.max_deviation = self.max_deviation.max(dev);
            if dev > self.tolerance {
                self.mismatches += 1;
            }
        }
    }

    pub fn clean(&self) -> bool {
        self.mismatches == 0
    }
}

/// Splits `w` into `n` matrices that sum to it: n−1 uniform draws plus the
/// residual. Local to the oracle so the check does not lean on the crate's
/// own splitting code.
fn residual_split(w: &Tensor, n: usize, rng: &mut Rng) -> Vec<Tensor> {
    let s = w.max_abs() / n as f64;
    let mut residual = w.clone();
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        let part = Tensor::from_vec(
            w.shape(),
            (0..w.len()).map(|_| rng.uniform(-s, s)).collect(),
        )
        .unwrap();
        residual = residual.sub(&part).unwrap();
        parts.push(part);
    }
    parts.push(residual);
    parts
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Executable proof, on one random instance, that branch masking constrained
/// to one shared mask per unit is unit dropout. Three ways of computing the
/// post-activation output must agree within 1e-12 for every element, mask,
/// and input, under both relu and tanh:
///   1. the group-masked branch layer followed by the activation,
///   2. a plain layer on the summed weight, activation, then a dropout layer
///      fed the identical mask,
///   3. a loop recomputation of activation(mask·(sum_k w_k x + b)).
pub fn verify_dropout_reduction(
    d: usize,
    d_hat: usize,
    p: f64,
    n_inputs: usize,
    rng: &mut Rng,
) -> Result<ReductionReport> {
    if d == 0 || d_hat == 0 || n_inputs == 0 {
        return Err(Error::Domain("dropout reduction needs positive sizes".into()));
    }
    let w = random_tensor(&[d_hat, d], rng);
    let bias = random_tensor(&[d_hat], rng);
    let n_branches = 2 + rng.index(4);
    let branches = residual_split(&w, n_branches, rng);
    let sb = SbLinear::new(branches, vec![p; n_branches], Some(bias.clone()))?;
    let mut gm = as_group_masked(&sb)?;
    // the plain layer carries the exact branch sum; Eq-level the reduction
    // compares against that sum, and it keeps paths 1 and 2 bitwise-alike
    let mut lin = Linear::new(gm.weight.clone(), Some(bias.clone()))?;
    let mut dropout = Dropout::new(p)?;

    let x = random_tensor(&[n_inputs, d], rng);
    let mask = bernoulli(rng, &[n_inputs, d_hat], p)?;

    let masked = gm.forward_train_with_mask(&x, mask.clone())?;
    let z = lin.forward(&x, Mode::Eval)?;

    // loop recomputation of the masked pre-activation
    let mut raw = vec![0.0; n_inputs * d_hat];
    for b in 0..n_inputs {
        for i in 0..d_hat {
            let mut s = bias.data()[i];
            for j in 0..d {
                s += gm.weight.data()[i * d + j] * x.data()[b * d + j];
            }
            raw[b * d_hat + i] = mask.data()[b * d_hat + i] * s;
        }
    }

    let mut report = ReductionReport::new();
    let mut relu_a = Relu::new();
    let mut relu_b = Relu::new();
    let path1 = relu_a.forward(&masked, Mode::Eval);
    let path2 = dropout.forward_train_with_mask(&relu_b.forward(&z, Mode::Eval), mask.clone())?;
    let path3: Vec<f64> = raw.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    report.compare(path1.data(), path2.data());
    report.compare(path1.data(), &path3);

    let mut tanh_a = Tanh::new();
    let mut tanh_b = Tanh::new();
    let path1 = tanh_a.forward(&masked, Mode::Eval);
    let path2 = dropout.forward_train_with_mask(&tanh_b.forward(&z, Mode::Eval), mask)?;
    let path3: Vec<f64> = raw.iter().map(|v| v.tanh()).collect();
    report.compare(path1.data(), path2.data());
    report.compare(path1.data(), &path3);

    Ok(report)
}

/// Executable proof that one-branch-per-input masking is per-connection
/// dropout: the branch layer's forced-mask forward must match the loop
/// computation of (M ⊙ W)x with the paired connection mask within 1e-12.
pub fn verify_dropconnect_reduction(
    d: usize,
    d_hat: usize,
    p: f64,
    n_inputs: usize,
    rng: &mut Rng,
) -> Result<ReductionReport> {
    if d == 0 || d_hat == 0 || n_inputs == 0 {
        return Err(Error::Domain("dropconnect reduction needs positive sizes".into()));
    }
    let w = random_tensor(&[d_hat, d], rng);
    let mut layer = as_dropconnect(&w, p)?;
    let x = random_tensor(&[n_inputs, d], rng);
    let bits = bernoulli(rng, &[n_inputs, d_hat, d], p)?;
    let got = layer.forward_train_with_masks(&x, MaskBatch::new(bits.clone())?)?;

    let mut want = vec![0.0; n_inputs * d_hat];
    for b in 0..n_inputs {
        for i in 0..d_hat {
            let mut s = 0.0;
            for j in 0..d {
                s += bits.data()[(b * d_hat + i) * d + j]
                    * w.data()[i * d + j]
                    * x.data()[b * d + j];
            }
            want[b * d_hat + i] = s;
        }
    }
    let mut report = ReductionReport::new();
    report.compare(got.data(), &want);
    Ok(report)
}
