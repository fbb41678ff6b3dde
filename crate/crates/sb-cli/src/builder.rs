//! Turns an architecture description into a live network.
//!
//! Every weight layer forks its own labeled stream from the init generator,
//! so inserting or reordering layers never shifts another layer's draws.

use sb_core::branch::{self, BranchInit, BranchSpec};
use sb_core::layers::{BatchNorm, Conv2d, Dropout, Flatten, Layer, Linear, Relu, SbConv2d, Tanh};
use sb_core::{Network, Rng, Tensor};

use crate::config::{BranchInitMode, LayerSpec, RunConfig};
use crate::error::{CliError, CliResult};

fn uniform_tensor(shape: &[usize], limit: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

fn spec_for(mode: &BranchInitMode, branches: usize, keep_prob: f64) -> BranchSpec {
    let init = match mode {
        BranchInitMode::RandomSplit => BranchInit::RandomSplit,
        BranchInitMode::PretrainedExpand => BranchInit::PretrainedExpand,
    };
    BranchSpec::uniform(branches, keep_prob, init)
}

fn core(err: sb_core::Error) -> CliError {
    CliError::Config(err.to_string())
}

/// Builds the network with fresh weights: uniform on ±1/sqrt(fan_in), zero
/// biases. Branch layers first draw the reference weight a plain layer would
/// get, then split or replicate it per the configured init, so a branch
/// layer and its plain twin start from the same collapsed function.
pub fn build_network(cfg: &RunConfig, init_rng: &Rng) -> CliResult<Network> {
    let mut layers = Vec::with_capacity(cfg.architecture.len());
    for (i, spec) in cfg.architecture.iter().enumerate() {
        let mut rng = init_rng.fork(&format!("init/layer{i}"));
        let layer = match spec {
            LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
            LayerSpec::Relu => Layer::Relu(Relu::new()),
            LayerSpec::Tanh => Layer::Tanh(Tanh::new()),
            LayerSpec::Dropout { keep_prob } => {
                Layer::Dropout(Dropout::new(*keep_prob).map_err(core)?)
            }
            LayerSpec::BatchNorm { features, momentum, epsilon } => {
                Layer::BatchNorm(BatchNorm::new(*features, *momentum, *epsilon).map_err(core)?)
            }
            LayerSpec::Linear { in_features, out_features, bias } => {
                let limit = 1.0 / (*in_features as f64).sqrt();
                let w = uniform_tensor(&[*out_features, *in_features], limit, &mut rng);
                let b = bias.then(|| Tensor::zeros(&[*out_features]));
                Layer::Linear(Linear::new(w, b).map_err(core)?)
            }
            LayerSpec::SbLinear { in_features, out_features, branches, keep_prob, init, bias } => {
                let limit = 1.0 / (*in_features as f64).sqrt();
                let w = uniform_tensor(&[*out_features, *in_features], limit, &mut rng);
                let b = bias.then(|| Tensor::zeros(&[*out_features]));
                let spec = spec_for(init, *branches, *keep_prob);
                let layer = match init {
                    BranchInitMode::RandomSplit => {
                        branch::random_split(&w, &spec, b, &mut rng).map_err(core)?
                    }
                    BranchInitMode::PretrainedExpand => {
                        branch::expand_pretrained(&w, &spec, b).map_err(core)?
                    }
                };
                Layer::SbLinear(layer)
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad, bias } => {
                let fan_in = in_channels * kernel * kernel;
                let limit = 1.0 / (fan_in as f64).sqrt();
                let w = uniform_tensor(
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    limit,
                    &mut rng,
                );
                let b = bias.then(|| Tensor::zeros(&[*out_channels]));
                Layer::Conv2d(Conv2d::new(w, b, *stride, *pad).map_err(core)?)
            }
            LayerSpec::SbConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                branches,
                keep_prob,
                init,
                bias,
            } => {
                let fan_in = in_channels * kernel * kernel;
                let limit = 1.0 / (fan_in as f64).sqrt();
                let w = uniform_tensor(
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    limit,
                    &mut rng,
                );
                let b = bias.then(|| Tensor::zeros(&[*out_channels]));
                let spec = spec_for(init, *branches, *keep_prob);
                let layer = match init {
                    BranchInitMode::RandomSplit => {
                        branch::random_split_conv(&w, &spec, b, *stride, *pad, &mut rng)
                            .map_err(core)?
                    }
                    BranchInitMode::PretrainedExpand => {
                        let parts = branch::expand_tensor(&w, &spec).map_err(core)?;
                        SbConv2d::new(parts, spec.keep_probs.clone(), b, *stride, *pad)
                            .map_err(core)?
                    }
                };
                Layer::SbConv2d(layer)
            }
        };
        layers.push(layer);
    }
    Ok(Network::new(layers))
}
