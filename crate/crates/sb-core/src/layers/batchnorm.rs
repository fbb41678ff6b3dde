//! Batch normalization over the channel dimension.
//!
//! Accepts (batch, C) or (batch, C, spatial...) inputs; statistics are taken
//! per channel over every other dimension. Train mode normalizes by batch
//! statistics (biased variance) and folds them into the running estimates
//! with `running = (1 - momentum)·running + momentum·batch_stat`; Eval mode
//! normalizes by the running estimates and mutates nothing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mode;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    count: usize,
}

impl BatchNorm {
    pub fn new(features: usize, momentum: f64, epsilon: f64) -> Result<BatchNorm> {
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(Error::Domain(format!("batch norm momentum {momentum} outside (0, 1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Domain(format!("batch norm epsilon {epsilon} must be positive")));
        }
        Ok(BatchNorm {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
            momentum,
            epsilon,
            grad_gamma: Tensor::zeros(&[features]),
            grad_beta: Tensor::zeros(&[features]),
            cache: None,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// (batch, channels, per-channel spatial size) of an input.
    fn layout(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.ndim() < 2 || x.shape()[1] != self.features() {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.features()],
            });
        }
        let n = x.shape()[0];
        let c = x.shape()[1];
        let m: usize = x.shape()[2..].iter().product();
        Ok((n, c, m))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, m) = self.layout(x)?;
        match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch { batch: n });
                }
                let count = n * m;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * m;
                        for v in &x.data()[base..base + m] {
                            s += v;
                        }
                    }
                    let mu = s / count as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * m;
                        for v in &x.data()[base..base + m] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count as f64;
                }

                let mut x_hat = Tensor::zeros(x.shape());
                let mut y = Tensor::zeros(x.shape());
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    inv_std[ch] = 1.0 / (var[ch] + self.epsilon).sqrt();
                }
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * m;
                        let g = self.gamma.data()[ch];
                        let b = self.beta.data()[ch];
                        for s in 0..m {
                            let xh = (x.data()[base + s] - mean[ch]) * inv_std[ch];
                            x_hat.data_mut()[base + s] = xh;
                            y.data_mut()[base + s] = g * xh + b;
                        }
                    }
                }

                for ch in 0..c {
                    let rm = self.running_mean.data()[ch];
                    let rv = self.running_var.data()[ch];
                    self.running_mean.data_mut()[ch] =
                        (1.0 - self.momentum) * rm + self.momentum * mean[ch];
                    self.running_var.data_mut()[ch] =
                        (1.0 - self.momentum) * rv + self.momentum * var[ch];
                }

                self.cache = Some(Cache { x_hat, inv_std, count });
                Ok(y)
            }
            Mode::Eval => {
                let mut y = Tensor::zeros(x.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * m;
                        let istd = 1.0 / (self.running_var.data()[ch] + self.epsilon).sqrt();
                        let g = self.gamma.data()[ch];
                        let b = self.beta.data()[ch];
                        let mu = self.running_mean.data()[ch];
                        for s in 0..m {
                            y.data_mut()[base + s] = g * (x.data()[base + s] - mu) * istd + b;
                        }
                    }
                }
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batch norm backward before train forward".into()))?;
        let (n, c, m) = self.layout(grad)?;
        if grad.shape() != cache.x_hat.shape() {
            return Err(Error::Shape {
                op: "batch_norm backward",
                lhs: grad.shape().to_vec(),
                rhs: cache.x_hat.shape().to_vec(),
            });
        }
        let count = cache.count as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * m;
                for s in 0..m {
                    let g = grad.data()[base + s];
                    sum_g[ch] += g;
                    sum_gx[ch] += g * cache.x_hat.data()[base + s];
                }
            }
        }
        for ch in 0..c {
            self.grad_gamma.data_mut()[ch] = sum_gx[ch];
            self.grad_beta.data_mut()[ch] = sum_g[ch];
        }
        let mut gx = Tensor::zeros(grad.shape());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * m;
                let scale = self.gamma.data()[ch] * cache.inv_std[ch];
                for s in 0..m {
                    let g = grad.data()[base + s];
                    let xh = cache.x_hat.data()[base + s];
                    gx.data_mut()[base + s] =
                        scale * (g - sum_g[ch] / count - xh * sum_gx[ch] / count);
                }
            }
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_fixed_point_on_standardized_input() {
        // Per-channel zero-mean unit-variance input, gamma=1, beta=0: output
        // differs from input only through the epsilon in the denominator.
        let mut bn = BatchNorm::new(1, 0.1, 1e-8).unwrap();
        let x = Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_channel_in_train_outputs_beta() {
        let mut bn = BatchNorm::new(2, 0.1, 1e-5).unwrap();
        bn.beta = Tensor::from_vec(&[2], vec![0.7, -0.3]).unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![5.0, 2.0, 5.0, 2.0, 5.0, 2.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for row in y.rows() {
            assert_eq!(row, &[0.7, -0.3]);
        }
    }

    #[test]
    fn batch_of_one_in_train_is_an_error() {
        let mut bn = BatchNorm::new(3, 0.1, 1e-5).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(bn.forward(&x, Mode::Train), Err(Error::DegenerateBatch { batch: 1 })));
        // Eval has no such restriction.
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_uses_running_statistics_and_does_not_mutate() {
        let mut bn = BatchNorm::new(1, 0.5, 1e-12).unwrap();
        bn.running_mean = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        bn.running_var = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let x = Tensor::from_vec(&[2, 1], vec![4.0, 0.0]).unwrap();
        let before = bn.clone();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        // (4-2)/2 = 1, (0-2)/2 = -1
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] + 1.0).abs() < 1e-9);
        assert_eq!(bn.running_mean, before.running_mean);
        assert_eq!(bn.running_var, before.running_var);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut bn = BatchNorm::new(1, 0.5, 1e-5).unwrap();
        let x = Tensor::from_vec(&[2, 1], vec![0.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        // batch mean 2, biased var 4; running: 0.5·0 + 0.5·2, 0.5·1 + 0.5·4
        assert!((bn.running_mean.data()[0] - 1.0).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences_on_random_8x4() {
        let mut rng = crate::rng::Rng::new(14);
        let x = Tensor::from_vec(&[8, 4], (0..32).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let c = Tensor::from_vec(&[8, 4], (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let mut bn = BatchNorm::new(4, 0.1, 1e-5).unwrap();
        bn.gamma = Tensor::from_vec(&[4], (0..4).map(|_| rng.uniform(0.5, 1.5)).collect()).unwrap();
        bn.beta = Tensor::from_vec(&[4], (0..4).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap();

        let mut layer = bn.clone();
        layer.forward(&x, Mode::Train).unwrap();
        let gx = layer.backward(&c).unwrap();

        let loss = |bn0: &BatchNorm, x: &Tensor| {
            let mut l = bn0.clone();
            let y = l.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let num_x = crate::gradcheck::numeric_gradient(&x, 1e-5, |t| loss(&bn, t));
        assert!(crate::gradcheck::max_rel_err(gx.data(), num_x.data()) < 1e-6);

        let num_gamma = crate::gradcheck::numeric_gradient(&bn.gamma, 1e-5, |t| {
            let mut b2 = bn.clone();
            b2.gamma = t.clone();
            loss(&b2, &x)
        });
        assert!(crate::gradcheck::max_rel_err(layer.grad_gamma.data(), num_gamma.data()) < 1e-6);

        let num_beta = crate::gradcheck::numeric_gradient(&bn.beta, 1e-5, |t| {
            let mut b2 = bn.clone();
            b2.beta = t.clone();
            loss(&b2, &x)
        });
        assert!(crate::gradcheck::max_rel_err(layer.grad_beta.data(), num_beta.data()) < 1e-6);
    }

    #[test]
    fn spatial_input_normalizes_per_channel() {
        let mut bn = BatchNorm::new(2, 0.1, 1e-9).unwrap();
        // (batch 2, channels 2, spatial 2): channel 0 holds {1,3,5,7}, channel 1 constant.
        let x = Tensor::from_vec(
            &[2, 2, 2],
            vec![1.0, 3.0, 9.0, 9.0, 5.0, 7.0, 9.0, 9.0],
        )
        .unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        // channel 0: mean 4, biased var 5 -> values (x-4)/sqrt(5)
        let istd = 1.0 / (5.0f64 + 1e-9).sqrt();
        for (got, want) in [
            (y.data()[0], (1.0 - 4.0) * istd),
            (y.data()[1], (3.0 - 4.0) * istd),
            (y.data()[4], (5.0 - 4.0) * istd),
            (y.data()[5], (7.0 - 4.0) * istd),
        ] {
            assert!((got - want).abs() < 1e-9);
        }
        // channel 1 constant -> beta (zero)
        for idx in [2, 3, 6, 7] {
            assert_eq!(y.data()[idx], 0.0);
        }
    }
}
