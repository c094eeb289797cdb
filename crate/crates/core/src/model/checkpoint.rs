//! Model checkpoints: `manifest.json` plus one tensor blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::layer::LayerSpec;
use crate::error::{bail, Result};
use crate::tensor::{blob, DType, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    name: String,
    input_shape: Vec<usize>,
    dtype: DType,
    partition: usize,
    layers: Vec<LayerSpec>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
    trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
}

pub fn save_checkpoint(g: &ModelGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for p in g.params.iter() {
        let file = format!("{}.tblb", p.name);
        blob::save(&p.value, &dir.join(&file))?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            trainable: p.trainable,
            mask: p.mask.clone(),
        });
    }
    let m = Manifest {
        schema_version: CHECKPOINT_VERSION,
        name: g.name.clone(),
        input_shape: g.input_shape.clone(),
        dtype: g.dtype,
        partition: g.partition,
        layers: g.layers.clone(),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| crate::Error::Format(format!("manifest: {}", e)))?;
    if m.schema_version != CHECKPOINT_VERSION {
        bail!(
            Format,
            "unsupported checkpoint version {}",
            m.schema_version
        );
    }
    let mut store = ParamStore::new();
    for e in &m.params {
        if e.file.contains('/') || e.file.contains("..") {
            bail!(
                Format,
                "parameter file {:?} escapes the checkpoint directory",
                e.file
            );
        }
        let t = blob::load(&dir.join(&e.file))?;
        if e.trainable {
            store.insert(&e.name, t)?;
        } else {
            store.insert_buffer(&e.name, t)?;
        }
        if let Some(mask) = &e.mask {
            store.set_mask(&e.name, mask.clone())?;
        }
    }
    let mut g = ModelGraph {
        name: m.name,
        input_shape: m.input_shape,
        layers: m.layers,
        params: store,
        partition: m.partition,
        dtype: m.dtype,
    };
    g.refresh_metadata();
    g.validate()?;
    Ok(g)
}
