//! Model checkpoint files.
//!
//! A checkpoint is a JSON object
//! `{"formatVersion": 1, "config": {...}, "params": {...}}` with every
//! tensor stored as nested arrays of decimal numbers in row-major order.
//! `config` carries the variant flags, dimensions, and the ordered class
//! list; an optional top-level `norm` block stores the per-channel
//! normalization fitted at training time so inference can reuse it.
//! Loaders reject any other `formatVersion`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::data::NormStats;
use crate::error::{CoreError, Result};
use crate::model::{build_model, ModelConfig, ModelParams, Variant};
use crate::tensor::Tensor;

/// The only format this crate writes and accepts.
pub const FORMAT_VERSION: u64 = 1;

/// Everything a checkpoint file carries.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Ordered class names matching the head outputs.
    pub class_names: Vec<String>,
    /// Channel statistics fitted on the training split, if any.
    pub norm: Option<NormStats>,
}

fn tensor_to_value(t: &Tensor) -> Value {
    fn nest(shape: &[usize], data: &[f64]) -> Value {
        if shape.len() <= 1 {
            return Value::Array(data.iter().map(|&v| json!(v)).collect());
        }
        let chunk = data.len() / shape[0];
        Value::Array(
            (0..shape[0])
                .map(|i| nest(&shape[1..], &data[i * chunk..(i + 1) * chunk]))
                .collect(),
        )
    }
    nest(t.shape(), t.data())
}

fn value_to_tensor(v: &Value, shape: &[usize], what: &str) -> Result<Tensor> {
    fn flatten(v: &Value, shape: &[usize], out: &mut Vec<f64>, what: &str) -> Result<()> {
        let arr = v
            .as_array()
            .ok_or_else(|| CoreError::parse(None, format!("{what}: expected array")))?;
        if arr.len() != shape[0] {
            return Err(CoreError::parse(
                None,
                format!("{what}: expected {} entries, got {}", shape[0], arr.len()),
            ));
        }
        for item in arr {
            if shape.len() == 1 {
                out.push(item.as_f64().ok_or_else(|| {
                    CoreError::parse(None, format!("{what}: expected number"))
                })?);
            } else {
                flatten(item, &shape[1..], out, what)?;
            }
        }
        Ok(())
    }
    let mut data = Vec::with_capacity(shape.iter().product());
    flatten(v, shape, &mut data, what)?;
    Tensor::new(shape.to_vec(), data)
}

/// Builds the checkpoint JSON document.
pub fn to_json(ckpt: &Checkpoint) -> Result<Value> {
    let cfg = &ckpt.params.config;
    if ckpt.class_names.len() != cfg.num_classes {
        return Err(CoreError::Config(format!(
            "{} class names for {} classes",
            ckpt.class_names.len(),
            cfg.num_classes
        )));
    }

    let mut layers: BTreeMap<String, Map<String, Value>> = BTreeMap::new();
    let mut attn = Map::new();
    let mut head = Map::new();
    ckpt.params.visit(&mut |name, t| {
        let value = tensor_to_value(t);
        if let Some(rest) = name.strip_prefix("layer") {
            let (idx, field) = rest.split_once('.').expect("layer param names have a field");
            layers
                .entry(format!("layer_{idx}"))
                .or_default()
                .insert(field.to_string(), value);
        } else if let Some(field) = name.strip_prefix("attn.") {
            attn.insert(field.to_string(), value);
        } else if let Some(field) = name.strip_prefix("head.") {
            head.insert(field.to_string(), value);
        }
    });

    let mut params = Map::new();
    for (key, mut fields) in layers {
        if !cfg.variant.is_lstm() {
            let idx: usize = key.trim_start_matches("layer_").parse().expect("layer index");
            if let crate::model::LayerParams::Cell(c) = &ckpt.params.layers[idx] {
                fields.insert("fixed_a".to_string(), json!(c.fixed_a));
                fields.insert("fixed_b".to_string(), json!(c.fixed_b));
            }
        }
        params.insert(key, Value::Object(fields));
    }
    params.insert("attn".to_string(), Value::Object(attn));
    params.insert("head".to_string(), Value::Object(head));

    let mut doc = Map::new();
    doc.insert("formatVersion".to_string(), json!(FORMAT_VERSION));
    doc.insert(
        "config".to_string(),
        json!({
            "variant": cfg.variant.name(),
            "adaptive": cfg.variant.adaptive(),
            "attention": cfg.variant.attention(),
            "D": cfg.d,
            "K": cfg.k,
            "J": cfg.j,
            "omega0": cfg.omega0,
            "inputDim": cfg.input_dim,
            "numLayers": cfg.num_layers,
            "numClasses": cfg.num_classes,
            "classes": ckpt.class_names,
        }),
    );
    doc.insert("params".to_string(), Value::Object(params));
    if let Some(norm) = &ckpt.norm {
        doc.insert(
            "norm".to_string(),
            serde_json::to_value(norm).map_err(|e| CoreError::parse(None, e.to_string()))?,
        );
    }
    Ok(Value::Object(doc))
}

/// Writes the checkpoint as pretty-printed JSON.
pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let doc = to_json(ckpt)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CoreError::parse(None, e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn get<'v>(obj: &'v Value, key: &str) -> Result<&'v Value> {
    obj.get(key)
        .ok_or_else(|| CoreError::parse(None, format!("checkpoint missing {key:?}")))
}

fn get_usize(obj: &Value, key: &str) -> Result<usize> {
    get(obj, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| CoreError::parse(None, format!("{key} must be an integer")))
}

/// Reads a checkpoint file, rejecting unknown format versions.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| CoreError::parse(None, e.to_string()))?;

    let version = get(&doc, "formatVersion")?.as_u64().unwrap_or(0);
    if version != FORMAT_VERSION {
        return Err(CoreError::parse(
            None,
            format!("unsupported formatVersion {version}; this build reads {FORMAT_VERSION}"),
        ));
    }

    let cfg_v = get(&doc, "config")?;
    let variant: Variant = get(cfg_v, "variant")?
        .as_str()
        .ok_or_else(|| CoreError::parse(None, "variant must be a string"))?
        .parse()?;
    for (key, want) in [("adaptive", variant.adaptive()), ("attention", variant.attention())] {
        if let Some(flag) = cfg_v.get(key).and_then(Value::as_bool) {
            if flag != want {
                return Err(CoreError::parse(
                    None,
                    format!("config flag {key} = {flag} contradicts variant {}", variant.name()),
                ));
            }
        }
    }
    let config = ModelConfig {
        variant,
        d: get_usize(cfg_v, "D")?,
        k: get_usize(cfg_v, "K")?,
        j: get_usize(cfg_v, "J")?,
        omega0: get(cfg_v, "omega0")?
            .as_f64()
            .ok_or_else(|| CoreError::parse(None, "omega0 must be a number"))?,
        input_dim: get_usize(cfg_v, "inputDim")?,
        num_layers: get_usize(cfg_v, "numLayers")?,
        num_classes: get_usize(cfg_v, "numClasses")?,
    };
    let class_names: Vec<String> = get(cfg_v, "classes")?
        .as_array()
        .ok_or_else(|| CoreError::parse(None, "classes must be an array"))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| CoreError::parse(None, "class names must be strings"))
        })
        .collect::<Result<_>>()?;
    if class_names.len() != config.num_classes {
        return Err(CoreError::parse(
            None,
            format!("{} classes listed, numClasses = {}", class_names.len(), config.num_classes),
        ));
    }

    // Start from a structurally correct model, then overwrite every tensor.
    let mut params = build_model(config, 0)?;
    let params_v = get(&doc, "params")?;
    let mut failure: Option<CoreError> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let value = if let Some(rest) = name.strip_prefix("layer") {
            let (idx, field) = rest.split_once('.').expect("layer param names have a field");
            params_v.get(format!("layer_{idx}")).and_then(|l| l.get(field))
        } else if let Some(field) = name.strip_prefix("attn.") {
            params_v.get("attn").and_then(|a| a.get(field))
        } else if let Some(field) = name.strip_prefix("head.") {
            params_v.get("head").and_then(|h| h.get(field))
        } else {
            None
        };
        match value {
            None => failure = Some(CoreError::parse(None, format!("checkpoint missing tensor {name}"))),
            Some(v) => match value_to_tensor(v, t.shape(), &name) {
                Ok(tensor) => *t = tensor,
                Err(e) => failure = Some(e),
            },
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !config.variant.is_lstm() {
        for (idx, layer) in params.layers.iter_mut().enumerate() {
            if let crate::model::LayerParams::Cell(c) = layer {
                let layer_v = get(params_v, &format!("layer_{idx}"))?;
                c.fixed_a = layer_v.get("fixed_a").and_then(Value::as_f64).unwrap_or(1.0);
                c.fixed_b = layer_v.get("fixed_b").and_then(Value::as_f64).unwrap_or(0.0);
            }
        }
    }
    params.validate()?;

    let norm = match doc.get("norm") {
        None => None,
        Some(v) => Some(
            serde_json::from_value::<NormStats>(v.clone())
                .map_err(|e| CoreError::parse(None, format!("norm block: {e}")))?,
        ),
    };

    Ok(Checkpoint {
        params,
        class_names,
        norm,
    })
}
