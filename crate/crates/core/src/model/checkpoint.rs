//! Checkpoint directory: one `FTEN` file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{read_ften, write_ften};

#[derive(Serialize, Deserialize)]
struct Entry {
    file: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    params: BTreeMap<String, Entry>,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = BTreeMap::new();
    for p in model.params() {
        let file = format!("{}.ften", p.name);
        write_ften(&dir.join(&file), &p.value)?;
        params.insert(
            p.name.clone(),
            Entry {
                file,
                shape: p.value.shape().to_vec(),
                group: p.group,
            },
        );
    }
    let manifest = Manifest {
        model: model.config().clone(),
        params,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for (name, entry) in manifest.params {
        let file = dir.join(&entry.file);
        let tensor = read_ften(&file)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::data(
                &file,
                format!("shape {:?} disagrees with manifest {:?}", tensor.shape(), entry.shape),
            ));
        }
        tensors.push((name, tensor));
    }
    Model::from_tensors(manifest.model, tensors).map_err(|e| Error::data(&path, e.to_string()))
}
