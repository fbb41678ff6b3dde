//! Run configuration: JSON schema, shape-chain validation, and the built-in
//! presets.
//!
//! A config document either spells out every section or names a `preset`
//! and overrides whole sections. Overrides replace the section; they are not
//! deep-merged.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use sb_core::layers::conv_output_hw;
use sb_core::train::SgdConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum BranchInitMode {
    /// Branches drawn around zero with an exact-residual last branch; the
    /// branch sum equals the reference init weight.
    RandomSplit,
    /// Every branch is the reference weight scaled by 1/(N·p); collapse
    /// reproduces the reference weight and branches start parallel.
    PretrainedExpand,
}

impl Default for BranchInitMode {
    fn default() -> Self {
        BranchInitMode::RandomSplit
    }
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "default_bias")]
        bias: bool,
    },
    SbLinear {
        in_features: usize,
        out_features: usize,
        branches: usize,
        keep_prob: f64,
        #[serde(default)]
        init: BranchInitMode,
        #[serde(default = "default_bias")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        #[serde(default = "default_bias")]
        bias: bool,
    },
    SbConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        branches: usize,
        keep_prob: f64,
        #[serde(default)]
        init: BranchInitMode,
        #[serde(default = "default_bias")]
        bias: bool,
    },
    BatchNorm {
        features: usize,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_epsilon")]
        epsilon: f64,
    },
    Dropout {
        keep_prob: f64,
    },
    Relu,
    Tanh,
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_epsilon() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl OptimizerConfig {
    pub fn to_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

fn default_fraction() -> f64 {
    1.0
}

fn default_n_train() -> usize {
    50_000
}

fn default_n_test() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX files under `<root>/{train,test}-{images,labels}.idx`. With no
    /// root configured the dataset-root environment variable is consulted.
    Idx {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
    /// Built-in procedural digit corpus; needs no files.
    Synthetic {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
}

impl DataConfig {
    pub fn fraction(&self) -> f64 {
        match self {
            DataConfig::Idx { fraction, .. } | DataConfig::Synthetic { fraction, .. } => *fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    /// Per-example input shape, e.g. [1, 28, 28].
    pub input: Vec<usize>,
    pub architecture: Vec<LayerSpec>,
}

/// On-disk document: either a complete config or a preset name with
/// section-level overrides.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub input: Option<Vec<usize>>,
    #[serde(default)]
    pub architecture: Option<Vec<LayerSpec>>,
}

pub const PRESET_NAMES: [&str; 6] = ["mlp3", "mlp5", "cnn", "mlp3-lite", "mlp5-lite", "cnn-lite"];

impl RunConfig {
    pub fn load(path: &std::path::Path) -> CliResult<RunConfig> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let doc: ConfigDoc = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig::resolve(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(doc: ConfigDoc) -> CliResult<RunConfig> {
        let base = match &doc.preset {
            Some(name) => Some(preset(name).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown preset {name:?}; available: {}",
                    PRESET_NAMES.join(", ")
                ))
            })?),
            None => None,
        };
        macro_rules! field {
            ($name:ident) => {
                match (doc.$name, &base) {
                    (Some(v), _) => v,
                    (None, Some(b)) => b.$name.clone(),
                    (None, None) => {
                        return Err(CliError::Config(format!(
                            "missing required field {:?} (and no preset)",
                            stringify!($name)
                        )))
                    }
                }
            };
        }
        Ok(RunConfig {
            seed: field!(seed),
            output_dir: field!(output_dir),
            data: field!(data),
            optimizer: field!(optimizer),
            input: field!(input),
            architecture: field!(architecture),
        })
    }

    /// Field-level validation: optimizer ranges, data ranges, and the layer
    /// chain checked shape-consistent end to end.
    pub fn validate(&self) -> CliResult<()> {
        self.optimizer
            .to_sgd()
            .validate()
            .map_err(|e| CliError::Config(format!("optimizer: {e}")))?;
        let fraction = self.data.fraction();
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CliError::Config(format!("data.fraction {fraction} outside (0, 1]")));
        }
        if let DataConfig::Synthetic { n_train, n_test, .. } = &self.data {
            if *n_train == 0 || *n_test == 0 {
                return Err(CliError::Config("synthetic data needs positive n_train and n_test".into()));
            }
        }
        if self.input.is_empty() {
            return Err(CliError::Config("input shape must be nonempty".into()));
        }
        if self.architecture.is_empty() {
            return Err(CliError::Config("architecture must list at least one layer".into()));
        }
        let out = validate_chain(&self.input, &self.architecture)?;
        if out.len() != 1 {
            return Err(CliError::Config(format!(
                "network output shape {out:?} is not a class-score vector; end with a linear layer"
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        // validate() guarantees a 1-D output
        validate_chain(&self.input, &self.architecture).map(|s| s[0]).unwrap_or(0)
    }
}

fn check_branch_fields(
    at: usize,
    branches: usize,
    keep_prob: f64,
) -> CliResult<()> {
    if branches == 0 {
        return Err(CliError::Config(format!("architecture[{at}]: branches must be positive")));
    }
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(CliError::Config(format!(
            "architecture[{at}]: keep_prob {keep_prob} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Walks the per-example shape through every layer, verifying declared sizes
/// against the incoming shape. Returns the output shape.
pub fn validate_chain(input: &[usize], layers: &[LayerSpec]) -> CliResult<Vec<usize>> {
    let mut shape = input.to_vec();
    let bad = |at: usize, msg: String| CliError::Config(format!("architecture[{at}]: {msg}"));
    for (at, spec) in layers.iter().enumerate() {
        shape = match spec {
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Linear { in_features, out_features, .. }
            | LayerSpec::SbLinear { in_features, out_features, .. } => {
                if shape != [*in_features] {
                    return Err(bad(
                        at,
                        format!("expects a flat {in_features}-vector, got {shape:?}"),
                    ));
                }
                if let LayerSpec::SbLinear { branches, keep_prob, .. } = spec {
                    check_branch_fields(at, *branches, *keep_prob)?;
                }
                vec![*out_features]
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad, .. }
            | LayerSpec::SbConv2d { in_channels, out_channels, kernel, stride, pad, .. } => {
                if shape.len() != 3 || shape[0] != *in_channels {
                    return Err(bad(
                        at,
                        format!("expects (channels={in_channels}, h, w), got {shape:?}"),
                    ));
                }
                if let LayerSpec::SbConv2d { branches, keep_prob, .. } = spec {
                    check_branch_fields(at, *branches, *keep_prob)?;
                }
                let (oh, ow) = conv_output_hw(shape[1], shape[2], *kernel, *kernel, *stride, *pad)
                    .map_err(|e| bad(at, e.to_string()))?;
                vec![*out_channels, oh, ow]
            }
            LayerSpec::BatchNorm { features, momentum, epsilon } => {
                if shape.is_empty() || shape[0] != *features {
                    return Err(bad(
                        at,
                        format!("normalizes {features} channels, got shape {shape:?}"),
                    ));
                }
                if !(*momentum > 0.0 && *momentum < 1.0) {
                    return Err(bad(at, format!("momentum {momentum} outside (0, 1)")));
                }
                if !(*epsilon > 0.0) {
                    return Err(bad(at, format!("epsilon {epsilon} must be positive")));
                }
                shape
            }
            LayerSpec::Dropout { keep_prob } => {
                if !(*keep_prob > 0.0 && *keep_prob <= 1.0) {
                    return Err(bad(at, format!("keep_prob {keep_prob} outside (0, 1]")));
                }
                shape
            }
            LayerSpec::Relu | LayerSpec::Tanh => shape,
        };
    }
    Ok(shape)
}

/// An SB multilayer perceptron block: branch layer, batch norm on the
/// pre-activation, relu.
fn sb_block(inf: usize, out: usize, init: BranchInitMode) -> Vec<LayerSpec> {
    vec![
        LayerSpec::SbLinear {
            in_features: inf,
            out_features: out,
            branches: 10,
            keep_prob: 0.5,
            init,
            bias: true,
        },
        LayerSpec::BatchNorm { features: out, momentum: 0.1, epsilon: 1e-5 },
        LayerSpec::Relu,
    ]
}

fn plain_block(inf: usize, out: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear { in_features: inf, out_features: out, bias: true },
        LayerSpec::BatchNorm { features: out, momentum: 0.1, epsilon: 1e-5 },
        LayerSpec::Relu,
    ]
}

fn mlp3(hidden: usize, data: DataConfig, epochs: usize) -> RunConfig {
    let mut architecture = vec![LayerSpec::Flatten];
    architecture.extend(sb_block(784, hidden, BranchInitMode::RandomSplit));
    architecture.extend(sb_block(hidden, hidden, BranchInitMode::RandomSplit));
    architecture.push(LayerSpec::Linear { in_features: hidden, out_features: 10, bias: true });
    RunConfig {
        seed: 1,
        output_dir: PathBuf::from("runs/mlp3"),
        data,
        optimizer: OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 100,
            epochs,
        },
        input: vec![1, 28, 28],
        architecture,
    }
}

fn mlp5(hidden: usize, data: DataConfig, epochs: usize) -> RunConfig {
    // branch layers on the first, third, and fifth weight layers
    let mut architecture = vec![LayerSpec::Flatten];
    architecture.extend(sb_block(784, hidden, BranchInitMode::RandomSplit));
    architecture.extend(plain_block(hidden, hidden));
    architecture.extend(sb_block(hidden, hidden, BranchInitMode::RandomSplit));
    architecture.extend(plain_block(hidden, hidden));
    architecture.push(LayerSpec::SbLinear {
        in_features: hidden,
        out_features: 10,
        branches: 10,
        keep_prob: 0.5,
        init: BranchInitMode::RandomSplit,
        bias: true,
    });
    let mut cfg = mlp3(hidden, data, epochs);
    cfg.output_dir = PathBuf::from("runs/mlp5");
    cfg.architecture = architecture;
    cfg
}

fn cnn(c1: usize, c2: usize, fc: usize, data: DataConfig, epochs: usize) -> RunConfig {
    // stride-2 convolutions stand in for pooling: 28 -> 14 -> 7
    let conv = |inc: usize, outc: usize| LayerSpec::SbConv2d {
        in_channels: inc,
        out_channels: outc,
        kernel: 5,
        stride: 2,
        pad: 2,
        branches: 10,
        keep_prob: 0.5,
        init: BranchInitMode::RandomSplit,
        bias: true,
    };
    let mut architecture = vec![
        conv(1, c1),
        LayerSpec::BatchNorm { features: c1, momentum: 0.1, epsilon: 1e-5 },
        LayerSpec::Relu,
        conv(c1, c2),
        LayerSpec::BatchNorm { features: c2, momentum: 0.1, epsilon: 1e-5 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ];
    architecture.extend(sb_block(c2 * 7 * 7, fc, BranchInitMode::RandomSplit));
    architecture.push(LayerSpec::Linear { in_features: fc, out_features: 10, bias: true });
    RunConfig {
        seed: 1,
        output_dir: PathBuf::from("runs/cnn"),
        data,
        optimizer: OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 100,
            epochs,
        },
        input: vec![1, 28, 28],
        architecture,
    }
}

/// Built-in configurations. The full-size shapes follow the reference
/// experiment (1024 hidden units, 5x5 kernels); `-lite` variants shrink to
/// 256 hidden units / 8-16 channels and subset data so they finish on a
/// desk machine.
pub fn preset(name: &str) -> Option<RunConfig> {
    let idx_full = DataConfig::Idx { root: None, fraction: 1.0 };
    let lite_subset = DataConfig::Synthetic { n_train: 50_000, n_test: 10_000, fraction: 0.2 };
    match name {
        "mlp3" => Some(mlp3(1024, idx_full, 20)),
        "mlp5" => Some(mlp5(1024, idx_full, 20)),
        "cnn" => Some(cnn(32, 64, 1024, idx_full, 20)),
        "mlp3-lite" => {
            let mut cfg = mlp3(256, lite_subset, 5);
            cfg.output_dir = PathBuf::from("runs/mlp3-lite");
            Some(cfg)
        }
        "mlp5-lite" => {
            let mut cfg = mlp5(256, lite_subset, 5);
            cfg.output_dir = PathBuf::from("runs/mlp5-lite");
            Some(cfg)
        }
        "cnn-lite" => {
            let mut cfg = cnn(
                8,
                16,
                128,
                DataConfig::Synthetic { n_train: 5_000, n_test: 1_000, fraction: 1.0 },
                2,
            );
            cfg.output_dir = PathBuf::from("runs/cnn-lite");
            Some(cfg)
        }
        _ => None,
    }
}
