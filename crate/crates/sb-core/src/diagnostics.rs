//! Measurement instruments: variance shift ratio, pairwise branch cosine
//! similarity, activation statistics, and plain equal-width histograms.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::network::Network;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Streaming mean/variance accumulator (Welford). Variance is the
/// population form (divide by n); a stream of identical values yields
/// exactly 0.
#[derive(Debug, Clone, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance; 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub fn variance_unbiased(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Train/eval variance discrepancy per neuron:
/// (VAR(y) - VAR(y*)) / VAR(y). Neurons whose train-mode variance is below
/// 1e-12 have no meaningful ratio and are reported as undefined.
pub fn vsr(var_train: f64, var_eval: f64) -> Option<f64> {
    if var_train < 1e-12 {
        None
    } else {
        Some((var_train - var_eval) / var_train)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VsrReport {
    pub per_neuron: Vec<Option<f64>>,
    /// Mean over defined neurons; None when every neuron is undefined.
    pub mean: Option<f64>,
    pub defined: usize,
    pub excluded: usize,
}

impl VsrReport {
    pub fn from_variances(var_train: &[f64], var_eval: &[f64]) -> Result<VsrReport> {
        if var_train.len() != var_eval.len() {
            return Err(Error::Constraint(format!(
                "{} train variances but {} eval variances",
                var_train.len(),
                var_eval.len()
            )));
        }
        let per_neuron: Vec<Option<f64>> =
            var_train.iter().zip(var_eval).map(|(&t, &e)| vsr(t, e)).collect();
        let defined: Vec<f64> = per_neuron.iter().filter_map(|v| *v).collect();
        let mean = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        Ok(VsrReport {
            defined: defined.len(),
            excluded: per_neuron.len() - defined.len(),
            per_neuron,
            mean,
        })
    }
}

/// Measures the variance shift ratio at the output of `layer` (that layer's
/// activations, all spatial coordinates counted as separate neurons).
///
/// VAR(y) pools variance over examples and mask draws: `n_mc` stochastic
/// passes per batch with fresh masks, deterministic layers held in Eval.
/// The pooled variance is assembled by the total-variance identity,
/// mean-over-examples(within-example variance) + variance-of(within-example
/// means), which equals direct pooling (every example contributes the same
/// n_mc draws) and makes the deterministic case exact: with no stochastic
/// layers each draw is bitwise the eval value, the within term is exactly 0,
/// and the between term is bitwise VAR(y*), so every defined neuron reports
/// exactly 0.
///
/// VAR(y*) comes from one Eval pass, variance across examples. The network
/// is cloned; the caller's instance is untouched.
pub fn measure_vsr(
    network: &Network,
    layer: usize,
    images: &Tensor,
    n_mc: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<VsrReport> {
    if n_mc < 2 {
        return Err(Error::Domain(format!("need at least 2 stochastic passes, got {n_mc}")));
    }
    if images.shape()[0] == 0 {
        return Err(Error::EmptyInput("variance probe over zero examples".into()));
    }
    let mut net = network.clone();
    let upto = layer + 1;

    let mut within_sum: Vec<f64> = Vec::new();
    let mut between: Vec<RunningMoments> = Vec::new();
    let mut eval_across: Vec<RunningMoments> = Vec::new();
    let mut n_examples = 0u64;

    let n = images.shape()[0];
    let stride: usize = images.shape()[1..].iter().product();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let b = end - start;
        let mut shape = images.shape().to_vec();
        shape[0] = b;
        let x = Tensor::from_vec(
            &shape,
            images.data()[start * stride..end * stride].to_vec(),
        )?;

        let eval_out = net.forward_to(&x, upto, Mode::Eval, None)?;
        let feat: usize = eval_out.shape()[1..].iter().product();
        if within_sum.is_empty() {
            within_sum = vec![0.0; feat];
            between = vec![RunningMoments::default(); feat];
            eval_across = vec![RunningMoments::default(); feat];
        }

        let mut draws: Vec<Tensor> = Vec::with_capacity(n_mc);
        for _ in 0..n_mc {
            draws.push(net.forward_noise_only(&x, upto, Some(rng))?);
        }

        for e in 0..b {
            for j in 0..feat {
                let mut m = RunningMoments::default();
                for d in &draws {
                    m.push(d.data()[e * feat + j]);
                }
                within_sum[j] += m.variance();
                between[j].push(m.mean());
                eval_across[j].push(eval_out.data()[e * feat + j]);
            }
        }
        n_examples += b as u64;
        start = end;
    }

    let var_train: Vec<f64> = within_sum
        .iter()
        .zip(&between)
        .map(|(w, b)| w / n_examples as f64 + b.variance())
        .collect();
    let var_eval: Vec<f64> = eval_across.iter().map(RunningMoments::variance).collect();
    VsrReport::from_variances(&var_train, &var_eval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineReport {
    /// Mean pairwise cosine over included (unit, branch-pair) combinations;
    /// None when every pair was excluded.
    pub mean: Option<f64>,
    pub pairs: usize,
    pub excluded: usize,
}

/// Mean pairwise cosine similarity between branch weight rows. Each tensor
/// is read as (units, rest...): row i of branch k against row i of branch l
/// for every pair k < l. Pairs touching a zero-norm row are excluded and
/// counted. Bitwise-identical rows short-circuit to exactly 1.0 (the
/// sqrt-product denominator would otherwise cost an ulp).
pub fn branch_cosine_rows(branches: &[&Tensor]) -> Result<CosineReport> {
    if branches.len() < 2 {
        return Err(Error::Constraint(format!(
            "pairwise cosine needs at least 2 branches, got {}",
            branches.len()
        )));
    }
    let shape = branches[0].shape();
    for b in branches {
        if b.shape() != shape {
            return Err(Error::Shape {
                op: "branch cosine",
                lhs: shape.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let units = shape[0];
    let width: usize = shape[1..].iter().product();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut excluded = 0usize;
    for i in 0..units {
        for k in 0..branches.len() {
            for l in k + 1..branches.len() {
                let a = &branches[k].data()[i * width..(i + 1) * width];
                let b = &branches[l].data()[i * width..(i + 1) * width];
                let na2: f64 = a.iter().map(|v| v * v).sum();
                let nb2: f64 = b.iter().map(|v| v * v).sum();
                if na2 == 0.0 || nb2 == 0.0 {
                    excluded += 1;
                    continue;
                }
                let c = if a == b {
                    1.0
                } else {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (na2.sqrt() * nb2.sqrt())
                };
                sum += c;
                pairs += 1;
            }
        }
    }
    let mean = if pairs == 0 { None } else { Some(sum / pairs as f64) };
    Ok(CosineReport { mean, pairs, excluded })
}

pub fn branch_cosine(layer: &crate::layers::SbLinear) -> Result<CosineReport> {
    branch_cosine_rows(&layer.branches.iter().collect::<Vec<_>>())
}

/// Conv branches are compared as flattened per-filter rows
/// (c_out, c_in·kh·kw).
pub fn branch_cosine_conv(layer: &crate::layers::SbConv2d) -> Result<CosineReport> {
    branch_cosine_rows(&layer.branches.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub per_neuron_mean: Vec<f64>,
    pub per_image_active: Vec<usize>,
    /// Neurons never above the threshold on any probe example.
    pub dead: usize,
    pub threshold: f64,
}

/// Eval-mode activation statistics at the output of `layer`. Meant to probe
/// post-nonlinearity outputs; a neuron is dead when its activation stays at
/// or below `threshold` (0 for relu semantics) on every example.
pub fn activation_stats(
    network: &Network,
    layer: usize,
    images: &Tensor,
    threshold: f64,
    batch_size: usize,
) -> Result<ActivationStats> {
    if images.shape()[0] == 0 {
        return Err(Error::EmptyInput("activation probe over zero examples".into()));
    }
    let mut net = network.clone();
    let upto = layer + 1;
    let n = images.shape()[0];
    let stride: usize = images.shape()[1..].iter().product();

    let mut sums: Vec<f64> = Vec::new();
    let mut ever_active: Vec<bool> = Vec::new();
    let mut per_image_active = Vec::with_capacity(n);

    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let b = end - start;
        let mut shape = images.shape().to_vec();
        shape[0] = b;
        let x = Tensor::from_vec(
            &shape,
            images.data()[start * stride..end * stride].to_vec(),
        )?;
        let out = net.forward_to(&x, upto, Mode::Eval, None)?;
        let feat: usize = out.shape()[1..].iter().product();
        if sums.is_empty() {
            sums = vec![0.0; feat];
            ever_active = vec![false; feat];
        }
        for e in 0..b {
            let row = &out.data()[e * feat..(e + 1) * feat];
            let mut active = 0;
            for (j, &v) in row.iter().enumerate() {
                sums[j] += v;
                if v > threshold {
                    active += 1;
                    ever_active[j] = true;
                }
            }
            per_image_active.push(active);
        }
        start = end;
    }

    Ok(ActivationStats {
        per_neuron_mean: sums.iter().map(|s| s / n as f64).collect(),
        per_image_active,
        dead: ever_active.iter().filter(|a| !**a).count(),
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// n_bins + 1 edges spanning [min, max].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over [min, max]; the last bin is right-closed so
/// counts always sum to the input length. A degenerate range (all values
/// equal) collapses to a single bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram of zero values".into()));
    }
    if n_bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(Histogram { edges: vec![min, max], counts: vec![values.len()] });
    }
    let width = (max - min) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let bin = (((v - min) / width) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let edges = (0..=n_bins)
        .map(|i| if i == n_bins { max } else { min + width * i as f64 })
        .collect();
    Ok(Histogram { edges, counts })
}
