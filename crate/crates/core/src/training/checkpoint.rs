use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, ModelSpec, TrainedModel};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write_json;
use crate::tensor::RngState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ParamValue {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    spec: ModelSpec,
    spec_hash: String,
    params: BTreeMap<String, ParamValue>,
    final_pi: Option<Vec<f64>>,
}

fn encode(model: &TrainedModel) -> CheckpointFile {
    let params = model
        .param_names()
        .into_iter()
        .zip(model.params())
        .zip(model.param_shapes())
        .map(|((name, values), (rows, cols))| {
            let value = if name.ends_with("bias") || name.ends_with("logits") {
                ParamValue::Vector(values.to_vec())
            } else {
                ParamValue::Matrix(values.chunks(cols.max(1)).take(rows).map(<[f64]>::to_vec).collect())
            };
            (name.to_string(), value)
        })
        .collect();
    CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: model.spec().clone(),
        spec_hash: model.spec().hash(),
        params,
        final_pi: model.final_pi.clone(),
    }
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    atomic_write_json(path, &encode(model))
}

pub fn checkpoint_to_string(model: &TrainedModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&encode(model))?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<TrainedModel> {
    // Check the version before the full schema so old files get a clear error.
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
    match raw.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {v}, expected {CHECKPOINT_FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    let file: CheckpointFile =
        serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    if file.spec.hash() != file.spec_hash {
        return Err(Error::Checkpoint("spec hash does not match the stored spec".into()));
    }
    let mut model = build_model(&file.spec, &mut RngState::new(file.spec.seed))?;
    let names = model.param_names();
    let shapes = model.param_shapes();
    if file.params.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            names.len(),
            file.params.len()
        )));
    }
    for (name, (rows, cols)) in names.iter().zip(shapes) {
        let value = file
            .params
            .get(*name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
        let flat = match value {
            ParamValue::Vector(v) => v.clone(),
            ParamValue::Matrix(m) => {
                if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                    return Err(Error::Checkpoint(format!("parameter '{name}' is not {rows}x{cols}")));
                }
                m.concat()
            }
        };
        model.set_param(name, &flat)?;
    }
    if let Some(pi) = &file.final_pi {
        if pi.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("final_pi contains non-finite values".into()));
        }
    }
    model.final_pi = file.final_pi;
    Ok(model)
}
