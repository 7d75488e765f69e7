//! Atomic file writes and LCKP checkpoints for datasets, models and adapters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use liera_core::data::{labels_from_tensor, labels_to_tensor, Dataset, Split, TaskSpec};
use liera_core::format::Container;
use liera_core::nn::{AdapterSet, Model, ModelKind};
use liera_core::peft::{AdapterConfig, AttachedAdapter, LowRankFactors};
use liera_core::rng::Rng;
use liera_core::DType;

use crate::error::{LabError, LabResult};

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> LabResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LabError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| LabError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| LabError::io(path, e))?;
    tmp.persist(path).map_err(|e| LabError::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> LabResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn read_container(path: &Path) -> LabResult<Container> {
    Container::from_bytes(&read_bytes(path)?).map_err(|source| LabError::Format { path: path.into(), source })
}

fn format_err(path: &Path, msg: impl Into<String>) -> LabError {
    LabError::Format {
        path: path.into(),
        source: liera_core::Error::InvalidArgument(msg.into()),
    }
}

fn json_entry<T: for<'de> Deserialize<'de>>(c: &Container, path: &Path) -> LabResult<T> {
    let text = c.json("meta.json").ok_or_else(|| format_err(path, "missing meta.json"))?;
    serde_json::from_str(text).map_err(|e| format_err(path, format!("meta.json: {e}")))
}

fn tensor_entry<'a>(c: &'a Container, path: &Path, name: &str) -> LabResult<&'a liera_core::Tensor> {
    c.tensor(name).ok_or_else(|| format_err(path, format!("missing entry {name}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: TaskSpec,
    pub split: Split,
    pub n_classes: usize,
}

pub fn dataset_to_container(ds: &Dataset, task: &TaskSpec) -> LabResult<Container> {
    let mut c = Container::new();
    let meta = DatasetMeta { task: task.clone(), split: ds.split, n_classes: ds.n_classes };
    c.insert_tensor("images", ds.images.clone()).map_err(liera_core::Error::from)?;
    c.insert_tensor("labels", labels_to_tensor(&ds.labels)?).map_err(liera_core::Error::from)?;
    c.insert_json("meta.json", serde_json::to_string(&meta).expect("serializable meta"))
        .map_err(liera_core::Error::from)?;
    Ok(c)
}

pub fn save_dataset(path: &Path, ds: &Dataset, task: &TaskSpec) -> LabResult<()> {
    atomic_write(path, &dataset_to_container(ds, task)?.to_bytes())
}

pub fn load_dataset(path: &Path) -> LabResult<(Dataset, TaskSpec)> {
    let c = read_container(path)?;
    let meta: DatasetMeta = json_entry(&c, path)?;
    let images = tensor_entry(&c, path, "images")?.clone();
    let labels = labels_from_tensor(tensor_entry(&c, path, "labels")?)?;
    let ds = Dataset::new(images, labels, meta.n_classes, meta.split)
        .map_err(|source| LabError::Format { path: path.into(), source })?;
    Ok((ds, meta.task))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub config: AdapterConfig,
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub input_dims: [usize; 3],
    pub n_classes: usize,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterMeta>,
}

const ADAPTER_PREFIX: &str = "adapter.";

/// Model weights, plus adapter factors when given. Adapters are always stored
/// unmerged.
pub fn model_to_container(model: &Model, adapters: Option<(&AdapterSet, &AdapterConfig)>) -> LabResult<Container> {
    let mut c = Container::new();
    let dtype = model.named_tensors().values().next().map(|t| t.dtype()).unwrap_or(DType::F64);
    for (name, t) in model.named_tensors() {
        c.insert_tensor(name, t).map_err(liera_core::Error::from)?;
    }
    let mut adapter = None;
    if let Some((set, config)) = adapters {
        let mut set = set.clone();
        if set.iter().any(|(_, a)| a.is_merged()) {
            set.unmerge_all()?;
        }
        for (name, t) in set.factor_tensors() {
            c.insert_tensor(format!("{ADAPTER_PREFIX}{name}"), t).map_err(liera_core::Error::from)?;
        }
        adapter = Some(AdapterMeta {
            config: config.clone(),
            layers: set.iter().map(|(n, _)| n.to_string()).collect(),
        });
    }
    let meta = ModelMeta {
        kind: model.kind,
        input_dims: model.input_dims,
        n_classes: model.n_classes,
        dtype,
        adapter,
    };
    c.insert_json("meta.json", serde_json::to_string(&meta).expect("serializable meta"))
        .map_err(liera_core::Error::from)?;
    Ok(c)
}

pub fn save_model(path: &Path, model: &Model, adapters: Option<(&AdapterSet, &AdapterConfig)>) -> LabResult<()> {
    atomic_write(path, &model_to_container(model, adapters)?.to_bytes())
}

/// A model checkpoint and its adapters, if it carries any.
pub struct LoadedModel {
    pub model: Model,
    pub adapters: Option<(AdapterSet, AdapterConfig)>,
}

pub fn load_model(path: &Path) -> LabResult<LoadedModel> {
    let c = read_container(path)?;
    let meta: ModelMeta = json_entry(&c, path)?;
    let wrap = |source| LabError::Format { path: path.into(), source };
    // Built only for its layer structure; every tensor is overwritten below.
    let mut model = Model::build(meta.kind, meta.input_dims, meta.n_classes, meta.dtype, &mut Rng::new(0)).map_err(wrap)?;
    let tensors: BTreeMap<String, liera_core::Tensor> = c
        .entries()
        .filter(|(n, _)| !n.starts_with(ADAPTER_PREFIX))
        .filter_map(|(n, _)| c.tensor(n).map(|t| (n.to_string(), t.clone())))
        .collect();
    model.load_named_tensors(&tensors).map_err(wrap)?;
    let adapters = match meta.adapter {
        None => None,
        Some(am) => {
            let weights = model.named_tensors();
            let mut set = AdapterSet::new();
            for layer in &am.layers {
                let base = weights
                    .iter()
                    .find(|(k, _)| k.starts_with(&format!("{layer}.")) && !k.ends_with(".bias"))
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| format_err(path, format!("adapter for unknown layer {layer}")))?;
                let a = tensor_entry(&c, path, &format!("{ADAPTER_PREFIX}{layer}.A"))?.clone();
                let b = tensor_entry(&c, path, &format!("{ADAPTER_PREFIX}{layer}.B"))?.clone();
                let factors = LowRankFactors::new(a, b, am.config.alpha).map_err(wrap)?;
                set.insert(layer.clone(), AttachedAdapter::from_parts(base, factors, am.config.clone()).map_err(wrap)?);
            }
            Some((set, am.config))
        }
    };
    Ok(LoadedModel { model, adapters })
}
