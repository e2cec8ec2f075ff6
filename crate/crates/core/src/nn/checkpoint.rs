//! Checkpoint directories: one SGT1 file per parameter plus `manifest.toml`
//! recording the model configuration and the name → file mapping.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{io, Real};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "seanet-checkpoint-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(Error::Incompatible(format!("unknown checkpoint format {:?}", m.format)));
        }
        Ok(m)
    }
}

pub fn save_model<T: Real>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let file = format!("p{i:03}.sgt");
        io::save(&p.value, dir.join(&file))?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            group: p.group,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config: model.config().clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_model<T: Real>(dir: &Path) -> Result<Model<T>> {
    let manifest = CheckpointManifest::read(dir)?;
    let mut model = build_model::<T>(&manifest.config, 0).map_err(|e| Error::Incompatible(e.to_string()))?;
    let missing: Vec<_> = manifest
        .params
        .iter()
        .map(|e| dir.join(&e.file))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    if manifest.params.len() != model.params().len() {
        return Err(Error::Incompatible(format!(
            "checkpoint lists {} parameters, configuration implies {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for entry in &manifest.params {
        let t = io::load::<T>(dir.join(&entry.file))?;
        model.set_param(&entry.name, t)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![4, 8],
            stage_strides: vec![1, 2],
            attention_channels: vec![8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model::<f64>(&cfg(), 5).unwrap();
        save_model(&m, dir.path()).unwrap();
        let back = load_model::<f64>(dir.path()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn wrong_shape_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model::<f32>(&cfg(), 5).unwrap();
        save_model(&m, dir.path()).unwrap();
        io::save(&Tensor::<f32>::zeros([3, 3]).unwrap(), dir.path().join("p000.sgt")).unwrap();
        let err = load_model::<f32>(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }
}
