//! Checkpoints as safetensors files.
//!
//! Parameters are stored under their module path with a `param.` prefix,
//! momentum buffers under `momentum.`. The header metadata carries the format
//! version, the model and training configs, the normalization constants and
//! the metric history as JSON strings. Tensor data is little-endian.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype as StDtype, SafeTensors};

use crate::config::{ModelConfig, Normalization, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ImportanceModel;
use crate::train::{EpochLog, Trainer};

pub const FORMAT_VERSION: &str = "1";

const PARAM: &str = "param.";
const MOMENTUM: &str = "momentum.";

/// A loaded checkpoint.
pub struct Checkpoint {
    pub model: ImportanceModel,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub history: Vec<EpochLog>,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Trainer state to continue the run that wrote this checkpoint.
    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::resume(self.train.clone(), self.velocity.clone(), self.history.clone())
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            StDtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_view(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = Device::Cpu;
    match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Ok(Tensor::from_vec(v, shape, &dev)?)
        }
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok(Tensor::from_vec(v, shape, &dev)?)
        }
        other => Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

/// Writes model parameters and trainer state to `path`.
pub fn save_checkpoint(path: &Path, model: &ImportanceModel, trainer: &Trainer) -> Result<()> {
    let mut entries: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in model.named_vars() {
        let (dtype, bytes) = tensor_bytes(var.as_tensor())?;
        entries.push((format!("{PARAM}{name}"), dtype, var.dims().to_vec(), bytes));
    }
    for (name, v) in trainer.velocity() {
        let (dtype, bytes) = tensor_bytes(v)?;
        entries.push((format!("{MOMENTUM}{name}"), dtype, v.dims().to_vec(), bytes));
    }
    let views = entries
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let cfg = model.config();
    let mut meta = HashMap::new();
    meta.insert("format_version".to_owned(), FORMAT_VERSION.to_owned());
    meta.insert("dtype".to_owned(), format!("{:?}", model.dtype()).to_lowercase());
    meta.insert("model_config".to_owned(), json(cfg)?);
    meta.insert("train_config".to_owned(), json(trainer.config())?);
    meta.insert("normalization".to_owned(), json(&cfg.normalization)?);
    meta.insert("history".to_owned(), json(&trainer.history().to_vec())?);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn field<'a, T: serde::Deserialize<'a>>(meta: &'a HashMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata key `{key}` missing")))?;
    serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
}

/// Copies stored parameters into `model`, failing on the first missing,
/// extra or misshapen parameter with its module path.
pub fn restore_parameters(model: &ImportanceModel, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let vars = model.named_vars();
    for (name, var) in &vars {
        let stored = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")))?;
        if stored.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                stored.dims(),
                var.dims()
            )));
        }
        var.set(&stored.to_dtype(model.dtype())?)?;
    }
    if let Some(extra) = params.keys().find(|k| !vars.iter().any(|(n, _)| n == *k)) {
        return Err(Error::Checkpoint(format!("checkpoint parameter `{extra}` has no place in the model")));
    }
    Ok(())
}

type Contents = (HashMap<String, String>, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>);

fn read_contents(path: &Path) -> Result<Contents> {
    let buffer = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(bad)?;
    let meta = header.metadata().clone().unwrap_or_default();
    match meta.get("format_version").map(String::as_str) {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Checkpoint(format!("unsupported checkpoint version {v}"))),
        None => return Err(Error::Checkpoint("checkpoint has no version tag".into())),
    }
    let st = SafeTensors::deserialize(&buffer).map_err(bad)?;
    let (mut params, mut velocity) = (BTreeMap::new(), BTreeMap::new());
    for (name, view) in st.tensors() {
        let t = tensor_from_view(&name, &view)?;
        if let Some(p) = name.strip_prefix(PARAM) {
            params.insert(p.to_owned(), t);
        } else if let Some(m) = name.strip_prefix(MOMENTUM) {
            velocity.insert(m.to_owned(), t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }
    Ok((meta, params, velocity))
}

fn stored_dtype(meta: &HashMap<String, String>) -> Result<DType> {
    match meta.get("dtype").map(String::as_str) {
        Some("f32") => Ok(DType::F32),
        Some("f64") => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    }
}

/// Loads a checkpoint, rebuilding the model from its stored config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, params, velocity) = read_contents(path)?;
    let cfg: ModelConfig = field(&meta, "model_config")?;
    load_into(cfg, &meta, params, velocity)
}

/// Loads a checkpoint into a model built from `cfg` instead of the stored
/// config; any parameter mismatch is reported with its module path.
pub fn load_checkpoint_with(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let (meta, params, velocity) = read_contents(path)?;
    load_into(cfg.clone(), &meta, params, velocity)
}

fn load_into(
    cfg: ModelConfig,
    meta: &HashMap<String, String>,
    params: BTreeMap<String, Tensor>,
    velocity: BTreeMap<String, Tensor>,
) -> Result<Checkpoint> {
    let dtype = stored_dtype(meta)?;
    let model = ImportanceModel::new(&cfg, dtype, 0)?;
    restore_parameters(&model, &params)?;
    let velocity = velocity
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        model,
        train: field(meta, "train_config")?,
        normalization: field(meta, "normalization")?,
        history: field(meta, "history")?,
        velocity,
    })
}
