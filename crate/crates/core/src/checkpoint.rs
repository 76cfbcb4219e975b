//! Checkpoints: a directory with `manifest.json` and one tensor file per
//! parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{tnsr, ParamStore};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    model: ModelConfig,
    channels: usize,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Backbone feature channels the embedding expects.
    pub channels: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Every parameter the model reads is present with the dims a fresh
    /// initialization would have.
    pub fn validate(&self) -> Result<()> {
        let fresh = self.model.init_params(self.channels, 0)?;
        for (name, t) in fresh.iter() {
            match self.params.get(name) {
                None => return Err(Error::MissingParams(vec![name.to_owned()])),
                Some(p) if p.dims() != t.dims() => {
                    return Err(Error::Config(format!(
                        "checkpoint parameter {name} has dims {:?}, model expects {:?}",
                        p.dims(),
                        t.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.params.iter() {
            let file = format!("{name}.tnsr");
            tnsr::write(dir.join(&file), t)?;
            entries.push(ParamEntry {
                name: name.to_owned(),
                dims: t.dims().to_vec(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            model: self.model.clone(),
            channels: self.channels,
            params: entries,
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a checkpoint from its directory or its manifest path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dir, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(CHECKPOINT_MANIFEST))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let t = tnsr::read(dir.join(&e.file))?;
            if t.dims() != e.dims.as_slice() {
                return Err(Error::Format(format!(
                    "{}: dims {:?} disagree with manifest {:?}",
                    e.file,
                    t.dims(),
                    e.dims
                )));
            }
            params.insert(e.name.clone(), t);
        }
        let ckpt = Self {
            model: manifest.model,
            channels: manifest.channels,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers: 1,
            hidden: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact_for_fresh_params() {
        let model = small();
        let ckpt = Checkpoint {
            params: model.init_params(4, 7).unwrap(),
            model,
            channels: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ckpt);
        assert_eq!(
            Checkpoint::load(dir.path().join(CHECKPOINT_MANIFEST)).unwrap(),
            ckpt
        );
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let model = small();
        let mut params = model.init_params(4, 7).unwrap();
        params.insert("sa.l0.wq", Tensor::zeros(&[4, 4]));
        let ckpt = Checkpoint {
            model,
            channels: 4,
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ckpt.save(dir.path()), Err(Error::Config(_))));
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
