//! Model serialization.
//!
//! Layout on disk:
//!
//! ```text
//! SBMODEL 1 <manifest-bytes>\n
//! <manifest JSON, exactly that many bytes>
//! <payload: all parameter tensors, little-endian f64, back to back>
//! ```
//!
//! The manifest records the architecture, the seed the run was started
//! with, where the file came from (`train`, `collapse`, ...), and one entry
//! per tensor with its shape and element offset into the payload. Offsets
//! must tile the payload exactly: each tensor starts where the previous one
//! ended and the last one ends at the end of the file. Loading rebuilds the
//! network bit for bit; saving and reloading is lossless.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sb_core::layers::{BatchNorm, Conv2d, Dropout, Flatten, Layer, Linear, Relu, SbConv2d, SbLinear, Tanh};
use sb_core::{Network, Tensor};

use crate::config::{validate_chain, LayerSpec};
use crate::error::{CliError, CliResult};

pub const MAGIC: &str = "SBMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Which command produced the file: "train" or "collapse".
    pub provenance: String,
    pub input_shape: Vec<usize>,
    pub architecture: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// A network together with the bookkeeping needed to reload or retrain it.
pub struct SavedModel {
    pub seed: u64,
    pub provenance: String,
    pub input_shape: Vec<usize>,
    pub architecture: Vec<LayerSpec>,
    pub network: Network,
}

fn bad(msg: String) -> CliError {
    CliError::Model(msg)
}

/// Every persistent tensor of a layer, with its manifest name. Gradients and
/// mask caches are transient and never stored.
fn layer_tensors(i: usize, layer: &Layer) -> Vec<(String, Tensor)> {
    let name = |suffix: &str| format!("layer{i}/{suffix}");
    match layer {
        Layer::Linear(l) => {
            let mut out = vec![(name("weight"), l.weight.clone())];
            if let Some(b) = &l.bias {
                out.push((name("bias"), b.clone()));
            }
            out
        }
        Layer::Conv2d(l) => {
            let mut out = vec![(name("weight"), l.weight.clone())];
            if let Some(b) = &l.bias {
                out.push((name("bias"), b.clone()));
            }
            out
        }
        Layer::SbLinear(l) => {
            let mut out: Vec<(String, Tensor)> = l
                .branches
                .iter()
                .enumerate()
                .map(|(k, w)| (name(&format!("branch{k}")), w.clone()))
                .collect();
            if let Some(b) = &l.bias {
                out.push((name("bias"), b.clone()));
            }
            out
        }
        Layer::SbConv2d(l) => {
            let mut out: Vec<(String, Tensor)> = l
                .branches
                .iter()
                .enumerate()
                .map(|(k, w)| (name(&format!("branch{k}")), w.clone()))
                .collect();
            if let Some(b) = &l.bias {
                out.push((name("bias"), b.clone()));
            }
            out
        }
        Layer::BatchNorm(l) => vec![
            (name("gamma"), l.gamma.clone()),
            (name("beta"), l.beta.clone()),
            (name("running_mean"), l.running_mean.clone()),
            (name("running_var"), l.running_var.clone()),
        ],
        Layer::Dropout(_) | Layer::Relu(_) | Layer::Tanh(_) | Layer::Flatten(_) => vec![],
    }
}

pub fn save(path: &Path, model: &SavedModel) -> CliResult<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (i, spec) in model.architecture.iter().enumerate() {
        let layer = model
            .network
            .layer(i)
            .map_err(|_| bad(format!("architecture lists {} layers but the network has fewer", model.architecture.len())))?;
        if layer.kind_name() != spec_kind_name(spec) {
            return Err(bad(format!(
                "layer {i} is {} in the network but {} in the architecture",
                layer.kind_name(),
                spec_kind_name(spec)
            )));
        }
        for (tensor_name, t) in layer_tensors(i, layer) {
            entries.push(TensorEntry {
                name: tensor_name,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: t.len() as u64,
            });
            payload.extend_from_slice(t.data());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: model.seed,
        provenance: model.provenance.clone(),
        input_shape: model.input_shape.clone(),
        architecture: model.architecture.clone(),
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| bad(format!("manifest serialization: {e}")))?;

    let mut bytes = Vec::with_capacity(manifest_json.len() + payload.len() * 8 + 32);
    write!(&mut bytes, "{MAGIC} {FORMAT_VERSION} {}\n", manifest_json.len())
        .expect("writing to a Vec cannot fail");
    bytes.extend_from_slice(&manifest_json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }

    let tmp = path.with_extension("sbm.tmp");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| bad(format!("{}: {e}", dir.display())))?;
        }
    }
    std::fs::write(&tmp, &bytes).map_err(|e| bad(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn spec_kind_name(spec: &LayerSpec) -> &'static str {
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

pub fn load(path: &Path) -> CliResult<SavedModel> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| bad("header is not text".into()))?;
    let mut parts = header.split_ascii_whitespace();
    let magic = parts.next().unwrap_or("");
    if magic != MAGIC {
        return Err(bad(format!("not a model file (leads with {magic:?}, expected {MAGIC:?})")));
    }
    let version: u32 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("unreadable format version in header".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version} not supported (this build reads version {FORMAT_VERSION})"
        )));
    }
    let manifest_len: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("unreadable manifest length in header".into()))?;
    if parts.next().is_some() {
        return Err(bad("trailing tokens in header line".into()));
    }

    let manifest_start = newline + 1;
    let payload_start = manifest_start + manifest_len;
    if bytes.len() < payload_start {
        return Err(bad(format!(
            "file ends inside the manifest (need {} bytes, have {})",
            payload_start,
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..payload_start])
        .map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "manifest says format version {}, header says {FORMAT_VERSION}",
            manifest.format_version
        )));
    }

    let payload_bytes = &bytes[payload_start..];
    if payload_bytes.len() % 8 != 0 {
        return Err(bad(format!(
            "payload is {} bytes, not a whole number of 8-byte values",
            payload_bytes.len()
        )));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact gives 8")))
        .collect();

    // entries must tile the payload contiguously and exactly
    let mut cursor = 0u64;
    for e in &manifest.tensors {
        let product: usize = e.shape.iter().product();
        if product as u64 != e.len {
            return Err(bad(format!(
                "tensor {} declares len {} but shape {:?} holds {product} values",
                e.name, e.len, e.shape
            )));
        }
        if e.offset != cursor {
            return Err(bad(format!(
                "tensor {} starts at offset {} but the previous tensor ends at {cursor}",
                e.name, e.offset
            )));
        }
        cursor += e.len;
    }
    if cursor != payload.len() as u64 {
        return Err(bad(format!(
            "tensors cover {cursor} values but the payload holds {}",
            payload.len()
        )));
    }

    validate_chain(&manifest.input_shape, &manifest.architecture)
        .map_err(|e| bad(format!("stored architecture is inconsistent: {e}")))?;

    let network = rebuild_network(&manifest, &payload)?;
    Ok(SavedModel {
        seed: manifest.seed,
        provenance: manifest.provenance,
        input_shape: manifest.input_shape,
        architecture: manifest.architecture,
        network,
    })
}

fn rebuild_network(manifest: &Manifest, payload: &[f64]) -> CliResult<Network> {
    let take = |name: &str, want_shape: Option<&[usize]>| -> CliResult<Tensor> {
        let e = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("manifest is missing tensor {name}")))?;
        if let Some(want) = want_shape {
            if e.shape != want {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, architecture implies {want:?}",
                    e.shape
                )));
            }
        }
        let start = e.offset as usize;
        let data = payload[start..start + e.len as usize].to_vec();
        Tensor::from_vec(&e.shape, data)
            .map_err(|err| bad(format!("tensor {name}: {err}")))
    };
    let core = |i: usize| move |err: sb_core::Error| bad(format!("layer {i}: {err}"));

    let mut layers = Vec::with_capacity(manifest.architecture.len());
    for (i, spec) in manifest.architecture.iter().enumerate() {
        let name = |suffix: &str| format!("layer{i}/{suffix}");
        let layer = match spec {
            LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
            LayerSpec::Relu => Layer::Relu(Relu::new()),
            LayerSpec::Tanh => Layer::Tanh(Tanh::new()),
            LayerSpec::Dropout { keep_prob } => {
                Layer::Dropout(Dropout::new(*keep_prob).map_err(core(i))?)
            }
            LayerSpec::BatchNorm { features, momentum, epsilon } => {
                let mut bn = BatchNorm::new(*features, *momentum, *epsilon).map_err(core(i))?;
                bn.gamma = take(&name("gamma"), Some(&[*features]))?;
                bn.beta = take(&name("beta"), Some(&[*features]))?;
                bn.running_mean = take(&name("running_mean"), Some(&[*features]))?;
                bn.running_var = take(&name("running_var"), Some(&[*features]))?;
                Layer::BatchNorm(bn)
            }
            LayerSpec::Linear { in_features, out_features, bias } => {
                let w = take(&name("weight"), Some(&[*out_features, *in_features]))?;
                let b = if *bias { Some(take(&name("bias"), Some(&[*out_features]))?) } else { None };
                Layer::Linear(Linear::new(w, b).map_err(core(i))?)
            }
            LayerSpec::SbLinear { in_features, out_features, branches, keep_prob, bias, .. } => {
                let parts: Vec<Tensor> = (0..*branches)
                    .map(|k| take(&name(&format!("branch{k}")), Some(&[*out_features, *in_features])))
                    .collect::<CliResult<_>>()?;
                let b = if *bias { Some(take(&name("bias"), Some(&[*out_features]))?) } else { None };
                let probs = vec![*keep_prob; *branches];
                Layer::SbLinear(SbLinear::new(parts, probs, b).map_err(core(i))?)
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad, bias } => {
                let w = take(
                    &name("weight"),
                    Some(&[*out_channels, *in_channels, *kernel, *kernel]),
                )?;
                let b = if *bias { Some(take(&name("bias"), Some(&[*out_channels]))?) } else { None };
                Layer::Conv2d(Conv2d::new(w, b, *stride, *pad).map_err(core(i))?)
            }
            LayerSpec::SbConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                branches,
                keep_prob,
                bias,
                ..
            } => {
                let parts: Vec<Tensor> = (0..*branches)
                    .map(|k| {
                        take(
                            &name(&format!("branch{k}")),
                            Some(&[*out_channels, *in_channels, *kernel, *kernel]),
                        )
                    })
                    .collect::<CliResult<_>>()?;
                let b = if *bias { Some(take(&name("bias"), Some(&[*out_channels]))?) } else { None };
                let probs = vec![*keep_prob; *branches];
                Layer::SbConv2d(SbConv2d::new(parts, probs, b, *stride, *pad).map_err(core(i))?)
            }
        };
        layers.push(layer);
    }
    Ok(Network::new(layers))
}
