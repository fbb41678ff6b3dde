//! Loss, SGD, and the epoch loop tying mode switches, mask sampling,
//! backprop, and parameter updates together.
//!
//! Determinism contract: given (seed, config, data), final parameters are
//! bitwise reproducible. Each epoch uses two rng streams forked from the run
//! rng by labeled path ("shuffle/{epoch}" and "masks/{epoch}"), so batch
//! order and mask draws are independent of each other and of wall time.

use std::time::Instant;

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::network::Network;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Mean negative log-likelihood over the batch, stabilized with the
/// log-sum-exp shift. Also returns the logit gradient
/// (softmax - onehot)/batch so callers start backprop directly.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Constraint(format!("{b} logit rows but {} labels", labels.len())));
    }
    if b == 0 {
        return Err(Error::EmptyInput("cross entropy over zero examples".into()));
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    for (i, (&label, row)) in labels.iter().zip(logits.rows()).enumerate() {
        if label >= c {
            return Err(Error::Domain(format!("label {label} out of range for {c} classes")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += m + sum.ln() - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m).exp() / sum;
            grad.data_mut()[i * c + j] = (p - f64::from(u8::from(j == label))) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Index of the row maximum; ties go to the first.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// User-facing training hyperparameters with their validity ranges.
/// `epochs` may be zero: such a run writes the untrained model and an empty
/// metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Domain(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Domain(format!(
                "weight decay {} must be nonnegative and finite",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// SGD with momentum and decoupled-from-nothing classic L2 weight decay:
/// v <- momentum·v + grad + weight_decay·param; param <- param - lr·v.
/// Velocity buffers are created on the first step and must see the same
/// parameter list (count and shapes) ever after.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { learning_rate, momentum, weight_decay, velocities: Vec::new() }
    }

    pub fn from_config(cfg: &SgdConfig) -> Sgd {
        Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    }

    pub fn step(&mut self, mut params: Vec<(&mut Tensor, &Tensor)>) -> Result<()> {
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|(p, _)| Tensor::zeros(p.shape())).collect();
        } else if self.velocities.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer saw {} parameters before, now {}",
                self.velocities.len(),
                params.len()
            )));
        }
        for ((param, grad), v) in params.iter_mut().zip(self.velocities.iter_mut()) {
            if param.shape() != grad.shape() || param.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "sgd step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            for ((pv, gv), vv) in
                param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

/// One finished epoch of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_error: f64,
    pub seconds: f64,
}

/// Everything mutable across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub network: Network,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(network: Network, optimizer: Sgd) -> TrainState {
        TrainState { network, optimizer, epoch: 0, log: Vec::new() }
    }
}

/// Shuffled train pass (Train mode, fresh masks per batch) followed by an
/// in-order Eval pass over the test split. Appends one record.
pub fn run_epoch(
    state: &mut TrainState,
    train: &Dataset,
    test: &Dataset,
    batch_size: usize,
    run_rng: &Rng,
) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("epoch needs nonempty train and test splits".into()));
    }
    let started = Instant::now();
    let epoch = state.epoch;
    let mut shuffle_rng = run_rng.fork(&format!("shuffle/{epoch}"));
    let mut mask_rng = run_rng.fork(&format!("masks/{epoch}"));

    let mut loss_sum = 0.0;
    for batch in batch_indices(train.len(), batch_size, Some(&mut shuffle_rng))? {
        let (x, labels) = train.gather(&batch)?;
        let logits = state.network.forward(&x, Mode::Train, Some(&mut mask_rng))?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * batch.len() as f64;
        state.network.backward(&grad)?;
        state.optimizer.step(state.network.params())?;
    }

    let (_, test_error) = evaluate(&mut state.network, test, batch_size)?;
    state.epoch += 1;
    state.log.push(EpochRecord {
        epoch,
        train_loss: loss_sum / train.len() as f64,
        test_error,
        seconds: started.elapsed().as_secs_f64(),
    });
    Ok(())
}

/// Mean loss and error rate over the dataset in natural order, Eval mode.
/// Mutates nothing: parameters, masks, and BatchNorm running statistics are
/// exactly as before the call.
pub fn evaluate(network: &mut Network, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluate over zero examples".into()));
    }
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    for batch in batch_indices(ds.len(), batch_size, None)? {
        let (x, labels) = ds.gather(&batch)?;
        let logits = network.forward(&x, Mode::Eval, None)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * batch.len() as f64;
        for (row, &label) in logits.rows().zip(&labels) {
            if argmax(row) != label {
                wrong += 1;
            }
        }
    }
    Ok((loss_sum / ds.len() as f64, wrong as f64 / ds.len() as f64))
}
