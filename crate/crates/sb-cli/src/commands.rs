//! The five subcommands. Each returns a CliResult; main maps the error
//! category to the process exit code.

use std::path::{Path, PathBuf};

use serde_json::json;

use sb_core::branch;
use sb_core::data::Dataset;
use sb_core::diagnostics::{activation_stats, branch_cosine, branch_cosine_conv, histogram, measure_vsr};
use sb_core::gradcheck;
use sb_core::layers::{Conv2d, Layer, Linear, Mode};
use sb_core::oracle;
use sb_core::train::{evaluate, run_epoch, Sgd, TrainState};
use sb_core::{Network, Rng, Tensor};

use crate::builder::build_network;
use crate::config::{LayerSpec, RunConfig};
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::metrics;
use crate::model_file::{self, SavedModel};

const EVAL_BATCH: usize = 100;
const COLLAPSE_TOL: f64 = 1e-10;
const GRADCHECK_TOL: f64 = 1e-6;
const EXHAUSTIVE_TOL: f64 = 1e-10;
const VSR_PROBE_EXAMPLES: usize = 2000;
const VSR_PASSES: usize = 16;

fn data_err(e: sb_core::Error) -> CliError {
    CliError::Data(e.to_string())
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let (train, test) = dataset::resolve(&cfg.data, cfg.seed)?;
    check_labels(&train, cfg)?;
    check_labels(&test, cfg)?;
    println!(
        "training on {} examples, testing on {} ({} epochs, batch {})",
        train.len(),
        test.len(),
        cfg.optimizer.epochs,
        cfg.optimizer.batch_size
    );

    let network = build_network(cfg, &Rng::new(cfg.seed))?;
    let sgd = Sgd::from_config(&cfg.optimizer.to_sgd());
    let mut state = TrainState::new(network, sgd);
    let run_rng = Rng::new(cfg.seed).fork("train");
    for _ in 0..cfg.optimizer.epochs {
        run_epoch(&mut state, &train, &test, cfg.optimizer.batch_size, &run_rng)
            .map_err(data_err)?;
        let r = state.log.last().expect("run_epoch appends a record");
        println!(
            "epoch {:>3}  train loss {:.6}  test error {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.test_error, r.seconds
        );
    }

    let model = SavedModel {
        seed: cfg.seed,
        provenance: "train".into(),
        input_shape: cfg.input.clone(),
        architecture: cfg.architecture.clone(),
        network: state.network,
    };
    let model_path = cfg.output_dir.join("model.sbm");
    let metrics_path = cfg.output_dir.join("metrics.csv");
    model_file::save(&model_path, &model)?;
    metrics::write(&metrics_path, &state.log)?;
    println!("wrote {} and {}", model_path.display(), metrics_path.display());
    Ok(())
}

fn check_labels(ds: &Dataset, cfg: &RunConfig) -> CliResult<()> {
    let classes = cfg.n_classes();
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= classes) {
        return Err(CliError::Data(format!(
            "label {bad} outside the network's {classes} classes"
        )));
    }
    let per_example: usize = cfg.input.iter().product();
    if ds.example_len() != per_example {
        return Err(CliError::Data(format!(
            "examples hold {} values but the configured input shape {:?} implies {per_example}",
            ds.example_len(),
            cfg.input
        )));
    }
    Ok(())
}

pub fn cmd_eval(model_path: &Path, cfg: &RunConfig) -> CliResult<()> {
    let mut model = model_file::load(model_path)?;
    let (_, test) = dataset::resolve(&cfg.data, cfg.seed)?;
    let (loss, error) = evaluate(&mut model.network, &test, EVAL_BATCH).map_err(data_err)?;
    println!("test loss {loss:.6}");
    println!("test error {error:.4} ({} examples)", test.len());
    Ok(())
}

/// Folds every branch layer into its plain twin, checks on random probe
/// input that the folded network reproduces the original's eval outputs,
/// and writes the result as a new model file.
pub fn cmd_collapse(model_path: &Path, out_path: &Path, fault: Option<&str>) -> CliResult<()> {
    let model = model_file::load(model_path)?;
    let mut architecture = Vec::with_capacity(model.architecture.len());
    let mut layers = Vec::with_capacity(model.architecture.len());
    let mut folded = 0usize;
    for (i, spec) in model.architecture.iter().enumerate() {
        let layer = model.network.layer(i).expect("load built one layer per spec");
        match (spec, layer) {
            (LayerSpec::SbLinear { in_features, out_features, bias, .. }, Layer::SbLinear(l)) => {
                let w = branch::collapse(l);
                let lin = Linear::new(w, l.bias.clone())
                    .map_err(|e| CliError::Model(format!("layer {i}: {e}")))?;
                layers.push(Layer::Linear(lin));
                architecture.push(LayerSpec::Linear {
                    in_features: *in_features,
                    out_features: *out_features,
                    bias: *bias,
                });
                folded += 1;
            }
            (
                LayerSpec::SbConv2d {
                    in_channels, out_channels, kernel, stride, pad, bias, ..
                },
                Layer::SbConv2d(l),
            ) => {
                let w = branch::collapse_conv(l);
                let conv = Conv2d::new(w, l.bias.clone(), *stride, *pad)
                    .map_err(|e| CliError::Model(format!("layer {i}: {e}")))?;
                layers.push(Layer::Conv2d(conv));
                architecture.push(LayerSpec::Conv2d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                });
                folded += 1;
            }
            _ => {
                layers.push(layer.clone());
                architecture.push(spec.clone());
            }
        }
    }

    let mut collapsed = Network::new(layers);
    let mut original = model_file::load(model_path)?.network;
    let mut probe_shape = vec![16usize];
    probe_shape.extend_from_slice(&model.input_shape);
    let mut probe_rng = Rng::new(model.seed).fork("collapse-probe");
    let n: usize = probe_shape.iter().product();
    let probe = Tensor::from_vec(
        &probe_shape,
        (0..n).map(|_| probe_rng.uniform(0.0, 1.0)).collect(),
    )
    .expect("shape/data agree");
    let ya = original
        .forward(&probe, Mode::Eval, None)
        .map_err(|e| CliError::Model(e.to_string()))?;
    let mut yb = collapsed
        .forward(&probe, Mode::Eval, None)
        .map_err(|e| CliError::Model(e.to_string()))?;
    if fault == Some("collapse") {
        let v = yb.data()[0] + 1e-6;
        yb.data_mut()[0] = v;
    }
    let max_dev = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("folded {folded} branch layers; max probe deviation {max_dev:.3e}");
    if !(max_dev < COLLAPSE_TOL) {
        return Err(CliError::Verification(format!(
            "collapsed network deviates from the original by {max_dev:.3e} (tolerance {COLLAPSE_TOL:.0e})"
        )));
    }

    let out = SavedModel {
        seed: model.seed,
        provenance: "collapse".into(),
        input_shape: model.input_shape.clone(),
        architecture,
        network: collapsed,
    };
    model_file::save(out_path, &out)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn layer_kind(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Flatten => "flatten",
        LayerSpec::Linear { .. } => "linear",
        LayerSpec::SbLinear { .. } => "sb_linear",
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::SbConv2d { .. } => "sb_conv2d",
        LayerSpec::BatchNorm { .. } => "batch_norm",
        LayerSpec::Dropout { .. } => "dropout",
        LayerSpec::Relu => "relu",
        LayerSpec::Tanh => "tanh",
    }
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> CliResult<PathBuf> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
    std::fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn histogram_json(values: &[f64], bins: usize) -> serde_json::Value {
    match histogram(values, bins) {
        Ok(h) => json!({ "edges": h.edges, "counts": h.counts }),
        Err(_) => serde_json::Value::Null,
    }
}

/// Writes five reports: mask-noise variance shift at the representation
/// entering the classifier head, pairwise branch cosines, activation
/// statistics per nonlinearity, all-off probabilities, and implicit
/// ensemble sizes.
pub fn cmd_diagnose(model_path: &Path, cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    let model = model_file::load(model_path)?;
    let (_, test) = dataset::resolve(&cfg.data, cfg.seed)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;

    let n_probe = test.len().min(VSR_PROBE_EXAMPLES);
    let (probe, _) = test.gather(&(0..n_probe).collect::<Vec<_>>()).map_err(data_err)?;
    let n_layers = model.architecture.len();

    // variance shift at the input of the last layer
    let vsr_layer = n_layers.saturating_sub(2);
    let mut vsr_rng = Rng::new(cfg.seed).fork("diagnose/vsr");
    let vsr = measure_vsr(&model.network, vsr_layer, &probe, VSR_PASSES, EVAL_BATCH, &mut vsr_rng)
        .map_err(data_err)?;
    let vsr_path = write_json(
        out_dir,
        "vsr.json",
        &json!({
            "layer": vsr_layer,
            "probe_examples": n_probe,
            "stochastic_passes": VSR_PASSES,
            "mean": vsr.mean,
            "defined_neurons": vsr.defined,
            "excluded_neurons": vsr.excluded,
            "per_neuron": vsr.per_neuron,
        }),
    )?;

    let mut cosines = Vec::new();
    let mut turn_offs = Vec::new();
    let mut ensembles = Vec::new();
    let mut total_log2 = 0u64;
    for (i, spec) in model.architecture.iter().enumerate() {
        let layer = model.network.layer(i).expect("one layer per spec");
        let (report, keep_probs, units, branches) = match layer {
            Layer::SbLinear(l) => (
                branch_cosine(l).map_err(data_err)?,
                l.keep_probs.clone(),
                l.out_features(),
                l.n_branches(),
            ),
            Layer::SbConv2d(l) => (
                branch_cosine_conv(l).map_err(data_err)?,
                l.keep_probs.clone(),
                l.out_channels(),
                l.n_branches(),
            ),
            _ => continue,
        };
        cosines.push(json!({
            "layer": i,
            "kind": layer_kind(spec),
            "mean": report.mean,
            "pairs": report.pairs,
            "excluded": report.excluded,
        }));
        turn_offs.push(json!({
            "layer": i,
            "keep_probs": keep_probs,
            "all_off_probability": branch::turn_off_probability(&keep_probs),
        }));
        let log2 = branch::ensemble_log2(units, branches).map_err(data_err)?;
        total_log2 += log2;
        ensembles.push(json!({
            "layer": i,
            "units": units,
            "branches": branches,
            "log2_members": log2,
        }));
    }
    let cos_path = write_json(out_dir, "branch_cosine.json", &json!({ "layers": cosines }))?;
    let off_path = write_json(out_dir, "turn_off.json", &json!({ "layers": turn_offs }))?;
    let ens_path = write_json(
        out_dir,
        "ensemble.json",
        &json!({ "layers": ensembles, "total_log2_members": total_log2 }),
    )?;

    let mut acts = Vec::new();
    for (i, spec) in model.architecture.iter().enumerate() {
        if !matches!(spec, LayerSpec::Relu | LayerSpec::Tanh) {
            continue;
        }
        let stats = activation_stats(&model.network, i, &probe, 0.0, EVAL_BATCH)
            .map_err(data_err)?;
        let active: Vec<f64> = stats.per_image_active.iter().map(|&c| c as f64).collect();
        acts.push(json!({
            "layer": i,
            "kind": layer_kind(spec),
            "neurons": stats.per_neuron_mean.len(),
            "dead": stats.dead,
            "threshold": stats.threshold,
            "mean_activation_histogram": histogram_json(&stats.per_neuron_mean, 16),
            "active_per_image_histogram": histogram_json(&active, 16),
        }));
    }
    let act_path =
        write_json(out_dir, "activation_histograms.json", &json!({ "layers": acts }))?;

    for p in [&vsr_path, &cos_path, &act_path, &off_path, &ens_path] {
        println!("wrote {}", p.display());
    }
    match vsr.mean {
        Some(m) => println!("variance shift at layer {vsr_layer}: mean {m:.4} over {} neurons", vsr.defined),
        None => println!("variance shift at layer {vsr_layer}: undefined (all neurons constant)"),
    }
    Ok(())
}

struct Suite {
    name: &'static str,
    outcome: Result<String, String>,
}

fn suite_exhaustive(fault: Option<&str>) -> Result<String, String> {
    let mut rng = Rng::new(0xE417).fork("verify/exhaustive");
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d_hat = 1 + rng.index(4);
        let max_n = 20 / d_hat;
        let n = 1 + rng.index(max_n.min(4));
        let d = 1 + rng.index(5);
        let branches: Vec<Tensor> = (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..d_hat * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                Tensor::from_vec(&[d_hat, d], data).unwrap()
            })
            .collect();
        let keep_probs: Vec<f64> = (0..n).map(|_| 0.05 + 0.95 * rng.next_f64()).collect();
        let bias = Tensor::from_vec(&[d_hat], (0..d_hat).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let layer = sb_core::layers::SbLinear::new(branches, keep_probs, Some(bias))
            .map_err(|e| format!("case {case}: {e}"))?;
        let x = Tensor::from_vec(&[1, d], (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let report = oracle::exhaustive_expectation(&layer, &x.reshaped(&[d]).unwrap())
            .map_err(|e| format!("case {case}: {e}"))?;
        let mut eval = layer.forward_eval(&x).map_err(|e| format!("case {case}: {e}"))?;
        if fault == Some("exhaustive") {
            let v = eval.data()[0] + 1e-6;
            eval.data_mut()[0] = v;
        }
        for (a, b) in report.expectation.data().iter().zip(eval.data()) {
            worst = worst.max((a - b).abs());
        }
        if (report.probability_mass - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: probability mass {}", report.probability_mass));
        }
    }
    if worst <= EXHAUSTIVE_TOL {
        Ok(format!("50 layers, max |exhaustive - folded| = {worst:.3e}"))
    } else {
        Err(format!("max |exhaustive - folded| = {worst:.3e} exceeds {EXHAUSTIVE_TOL:.0e}"))
    }
}

fn suite_reduction(
    which: &'static str,
    fault: Option<&str>,
) -> Result<String, String> {
    let mut rng = Rng::new(0xD0D0).fork(which);
    let run = |d: usize, d_hat: usize, p: f64, n: usize, rng: &mut Rng| {
        if which == "dropout" {
            oracle::verify_dropout_reduction(d, d_hat, p, n, rng)
        } else {
            oracle::verify_dropconnect_reduction(d, d_hat, p, n, rng)
        }
    };
    let mut checks = 0usize;
    let mut worst = 0.0f64;
    for case in 0..40 {
        let d = 1 + rng.index(6);
        let d_hat = 1 + rng.index(6);
        let p = 0.05 + 0.95 * rng.next_f64();
        let mut report = run(d, d_hat, p, 4, &mut rng).map_err(|e| format!("case {case}: {e}"))?;
        if fault == Some(which) {
            report.mismatches += 1;
            report.max_deviation = report.max_deviation.max(1e-3);
        }
        checks += report.checks;
        worst = worst.max(report.max_deviation);
        if !report.clean() {
            return Err(format!(
                "case {case} (d={d}, units={d_hat}, p={p:.3}): {} of {} values off, worst {:.3e}",
                report.mismatches, report.checks, report.max_deviation
            ));
        }
    }
    Ok(format!("{checks} values agree, worst deviation {worst:.3e}"))
}

fn suite_gradients(fault: Option<&str>) -> Result<String, String> {
    let results = gradcheck::check_all_layers(0x9A4D);
    let tol = if fault == Some("gradient") { 1e-18 } else { GRADCHECK_TOL };
    let mut worst: (&str, f64) = ("", 0.0);
    for (kind, err) in &results {
        if *err > worst.1 {
            worst = (kind, *err);
        }
        if *err > tol {
            return Err(format!("{kind}: relative error {err:.3e} exceeds {tol:.0e}"));
        }
    }
    Ok(format!("{} layer kinds, worst {} at {:.3e}", results.len(), worst.0, worst.1))
}

fn suite_fold_round_trip(fault: Option<&str>) -> Result<String, String> {
    let mut rng = Rng::new(0xF01D).fork("verify/fold");
    let mut worst = 0.0f64;
    for case in 0..50 {
        let out = 1 + rng.index(8);
        let inp = 1 + rng.index(8);
        let n = 1 + rng.index(10);
        let p = 0.05 + 0.95 * rng.next_f64();
        let w = Tensor::from_vec(
            &[out, inp],
            (0..out * inp).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let spec = branch::BranchSpec::uniform(n, p, branch::BranchInit::PretrainedExpand);
        let layer = branch::expand_pretrained(&w, &spec, None)
            .map_err(|e| format!("case {case}: {e}"))?;
        let mut back = branch::collapse(&layer);
        if fault == Some("fold") {
            let v = back.data()[0] + 1e-6;
            back.data_mut()[0] = v;
        }
        for (a, b) in w.data().iter().zip(back.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("50 expand/fold cycles, worst drift {worst:.3e}"))
    } else {
        Err(format!("expand/fold drift {worst:.3e} exceeds 1e-12"))
    }
}

fn suite_model_file(fault: Option<&str>) -> Result<String, String> {
    use crate::config::{BranchInitMode, DataConfig, OptimizerConfig};
    let cfg = RunConfig {
        seed: 5,
        output_dir: PathBuf::from("unused"),
        data: DataConfig::Synthetic { n_train: 10, n_test: 10, fraction: 1.0 },
        optimizer: OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 10,
            epochs: 0,
        },
        input: vec![1, 28, 28],
        architecture: vec![
            LayerSpec::Flatten,
            LayerSpec::SbLinear {
                in_features: 784,
                out_features: 16,
                branches: 4,
                keep_prob: 0.5,
                init: BranchInitMode::RandomSplit,
                bias: true,
            },
            LayerSpec::BatchNorm { features: 16, momentum: 0.1, epsilon: 1e-5 },
            LayerSpec::Relu,
            LayerSpec::Linear { in_features: 16, out_features: 10, bias: true },
        ],
    };
    let network = build_network(&cfg, &Rng::new(5)).map_err(|e| e.to_string())?;
    let dir = std::env::temp_dir().join(format!("sb-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("round-trip.sbm");
    let model = SavedModel {
        seed: 5,
        provenance: "train".into(),
        input_shape: cfg.input.clone(),
        architecture: cfg.architecture.clone(),
        network,
    };
    model_file::save(&path, &model).map_err(|e| e.to_string())?;
    let mut back = model_file::load(&path).map_err(|e| e.to_string())?;
    let mut original = model;
    let x = Tensor::filled(&[3, 1, 28, 28], 0.5);
    let ya = original.network.forward(&x, Mode::Eval, None).map_err(|e| e.to_string())?;
    let mut yb = back.network.forward(&x, Mode::Eval, None).map_err(|e| e.to_string())?;
    if fault == Some("model-file") {
        let v = yb.data()[0] + 1.0;
        yb.data_mut()[0] = v;
    }
    std::fs::remove_file(&path).ok();
    let bitwise = ya
        .data()
        .iter()
        .zip(yb.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if bitwise {
        Ok("reloaded network reproduces outputs bit for bit".into())
    } else {
        Err("reloaded network gives different outputs".into())
    }
}

pub const FAULT_NAMES: [&str; 6] =
    ["exhaustive", "dropout", "dropconnect", "gradient", "fold", "model-file"];

/// Self-contained property checks, printed as a fixed table. Same output on
/// every run. The hidden fault injection flips one named suite to prove the
/// harness can fail.
pub fn cmd_verify(fault: Option<&str>) -> CliResult<()> {
    if let Some(f) = fault {
        if !FAULT_NAMES.contains(&f) {
            return Err(CliError::Config(format!(
                "unknown fault {f:?}; available: {}",
                FAULT_NAMES.join(", ")
            )));
        }
    }
    let suites = vec![
        Suite { name: "exhaustive-vs-fold", outcome: suite_exhaustive(fault) },
        Suite { name: "dropout-reduction", outcome: suite_reduction("dropout", fault) },
        Suite { name: "dropconnect-reduction", outcome: suite_reduction("dropconnect", fault) },
        Suite { name: "gradient-check", outcome: suite_gradients(fault) },
        Suite { name: "expand-fold-round-trip", outcome: suite_fold_round_trip(fault) },
        Suite { name: "model-file-round-trip", outcome: suite_model_file(fault) },
    ];
    let mut failed = Vec::new();
    for s in &suites {
        match &s.outcome {
            Ok(detail) => println!("ok    {:<24} {detail}", s.name),
            Err(detail) => {
                println!("FAIL  {:<24} {detail}", s.name);
                failed.push(s.name);
            }
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", suites.len());
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
