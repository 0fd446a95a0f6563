//! Checkpoint format (JSON, version 1):
//!
//! ```text
//! {
//!   "format": "mimcfr-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "tensors": {
//!     "<layer>.weight": { "shape": [in, out], "data": [...] },
//!     "<layer>.bias":   { "shape": [1, out],  "data": [...] },
//!     ...
//!   },
//!   "activations": { "<layer>": "elu" | "sigmoid" | "identity", ... }
//! }
//! ```
//!
//! Layer names are `shared.<i>`, `gamma.<i>`, `delta.<i>`, `upsilon.<i>`, `pi.<i>`,
//! `h0.<i>`, `h1.<i>`, and `q_gd|q_du|q_ug` followed by `.trunk.<i>`, `.mean` or
//! `.logvar`. Maps are sorted by key and floats use shortest round-trip notation,
//! so saving the same parameters always produces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{Activation, DenseLayer, Tensor2D};

pub const CHECKPOINT_FORMAT: &str = "mimcfr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
    activations: BTreeMap<String, Activation>,
}

fn named_layers(p: &ModelParams) -> Vec<(String, &DenseLayer)> {
    let mut out = Vec::new();
    fn push<'a>(out: &mut Vec<(String, &'a DenseLayer)>, prefix: &str, layers: &'a [DenseLayer]) {
        for (i, l) in layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}"), l));
        }
    }
    if let Some(s) = &p.shared {
        push(&mut out, "shared", &s.layers);
    }
    push(&mut out, "gamma", &p.gamma_head.layers);
    push(&mut out, "delta", &p.delta_head.layers);
    push(&mut out, "upsilon", &p.upsilon_head.layers);
    push(&mut out, "pi", &p.pi.layers);
    push(&mut out, "h0", &p.h0.layers);
    push(&mut out, "h1", &p.h1.layers);
    for (name, q) in [("q_gd", &p.q_gd), ("q_du", &p.q_du), ("q_ug", &p.q_ug)] {
        for (i, l) in q.trunk.layers.iter().enumerate() {
            out.push((format!("{name}.trunk.{i}"), l));
        }
        out.push((format!("{name}.mean"), &q.mean_head));
        out.push((format!("{name}.logvar"), &q.logvar_head));
    }
    out
}

fn named_layers_mut(p: &mut ModelParams) -> Vec<(String, &mut DenseLayer)> {
    let mut out = Vec::new();
    fn push<'a>(
        out: &mut Vec<(String, &'a mut DenseLayer)>,
        prefix: &str,
        layers: &'a mut [DenseLayer],
    ) {
        for (i, l) in layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}"), l));
        }
    }
    if let Some(s) = p.shared.as_mut() {
        push(&mut out, "shared", &mut s.layers);
    }
    push(&mut out, "gamma", &mut p.gamma_head.layers);
    push(&mut out, "delta", &mut p.delta_head.layers);
    push(&mut out, "upsilon", &mut p.upsilon_head.layers);
    push(&mut out, "pi", &mut p.pi.layers);
    push(&mut out, "h0", &mut p.h0.layers);
    push(&mut out, "h1", &mut p.h1.layers);
    for (name, q) in [
        ("q_gd", &mut p.q_gd),
        ("q_du", &mut p.q_du),
        ("q_ug", &mut p.q_ug),
    ] {
        push(&mut out, &format!("{name}.trunk"), &mut q.trunk.layers);
        out.push((format!("{name}.mean"), &mut q.mean_head));
        out.push((format!("{name}.logvar"), &mut q.logvar_head));
    }
    out
}

pub fn to_json(params: &ModelParams) -> Result<String> {
    let mut tensors = BTreeMap::new();
    let mut activations = BTreeMap::new();
    for (name, l) in named_layers(params) {
        tensors.insert(
            format!("{name}.weight"),
            TensorEntry {
                shape: [l.in_dim(), l.out_dim()],
                data: l.weight.data().to_vec(),
            },
        );
        tensors.insert(
            format!("{name}.bias"),
            TensorEntry {
                shape: [1, l.out_dim()],
                data: l.bias.clone(),
            },
        );
        activations.insert(name, l.activation);
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
        activations,
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<ModelParams> {
    let mut file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!(
            "not a checkpoint: format `{}`",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let mut params = ModelParams::init(file.config.clone())?;
    let expected = named_layers(&params).len();
    for (name, layer) in named_layers_mut(&mut params) {
        let w = file
            .tensors
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks `{name}.weight`")))?;
        let b = file
            .tensors
            .remove(&format!("{name}.bias"))
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks `{name}.bias`")))?;
        let act = *file
            .activations
            .get(&name)
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks activation of `{name}`")))?;
        if w.shape != [layer.in_dim(), layer.out_dim()] || b.shape != [1, layer.out_dim()] {
            return Err(Error::Schema(format!(
                "`{name}` has shape {:?}, config implies [{}, {}]",
                w.shape,
                layer.in_dim(),
                layer.out_dim()
            )));
        }
        *layer = DenseLayer::new(
            Tensor2D::from_vec(w.shape[0], w.shape[1], w.data)?,
            b.data,
            act,
        )?;
    }
    if let Some(extra) = file.tensors.keys().next() {
        return Err(Error::Schema(format!("unexpected tensor `{extra}`")));
    }
    if file.activations.len() != expected {
        return Err(Error::Schema(
            "activation map does not match the layers".into(),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
