//! On-disk datasets: a JSON manifest next to per-scene annotation, detection
//! and TNSR feature files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotation::{annotations_to_json, json_pointer, load_annotations, SceneAnnotation};
use super::synth::{synth_scene, Detections, SynthConfig, SynthScene};
use crate::error::{Error, Result};
use crate::geometry::RegionSet;
use crate::numerics::{tnsr, Tensor};
use crate::pixel_embedding::MultiScaleFeatures;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub annotation: PathBuf,
    pub word_detections: PathBuf,
    pub line_detections: PathBuf,
    /// X2, X3, X4, X5.
    pub features: [PathBuf; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub scenes: Vec<SceneEntry>,
}

/// A scene loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub split: Split,
    pub annotation: SceneAnnotation,
    pub features: MultiScaleFeatures,
    pub detections: Detections,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }
}

/// Generates every scene of `cfg` in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(Split, SynthScene)>> {
    cfg.validate()?;
    (0..cfg.total_scenes())
        .map(|i| {
            let split = if i < cfg.train_scenes {
                Split::Train
            } else {
                Split::Eval
            };
            Ok((split, synth_scene(cfg, i)?))
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates the dataset and writes it under `dir`. Nothing is written if
/// generation fails.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    let dir = dir.as_ref();
    let scenes = generate(cfg)?;
    let scene_root = dir.join("scenes");
    fs::create_dir_all(&scene_root).map_err(|e| Error::io(&scene_root, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (split, scene) in scenes {
        let id = scene.annotation.image_id.clone();
        let rel = PathBuf::from("scenes").join(&id);
        fs::create_dir_all(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        let entry = SceneEntry {
            id,
            split,
            annotation: rel.join("annotation.json"),
            word_detections: rel.join("words.json"),
            line_detections: rel.join("lines.json"),
            features: ["x2", "x3", "x4", "x5"].map(|s| rel.join(format!("{s}.tnsr"))),
        };
        write_file(
            &dir.join(&entry.annotation),
            annotations_to_json(std::slice::from_ref(&scene.annotation))?.as_bytes(),
        )?;
        write_file(
            &dir.join(&entry.word_detections),
            &serde_json::to_vec_pretty(&scene.detections.words)?,
        )?;
        write_file(
            &dir.join(&entry.line_detections),
            &serde_json::to_vec_pretty(&scene.detections.lines)?,
        )?;
        for (path, t) in entry.features.iter().zip(scene.features.scales()) {
            tnsr::write(dir.join(path), t)?;
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        scenes: entries,
    };
    write_file(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        pointer: format!("{}#{}", path.display(), json_pointer(e.path())),
        message: e.inner().to_string(),
    })
}

/// Loads a dataset from its manifest file or the directory holding it.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let manifest: Manifest = read_json(&manifest_path)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| load_scene(&root, e))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, scenes })
}

fn load_scene(root: &Path, entry: &SceneEntry) -> Result<Scene> {
    let mut anns = load_annotations(root.join(&entry.annotation))?;
    if anns.len() != 1 {
        return Err(Error::Format(format!(
            "{} holds {} annotations, expected 1",
            entry.annotation.display(),
            anns.len()
        )));
    }
    let annotation = anns.remove(0);
    let scales: Vec<Tensor> = entry
        .features
        .iter()
        .map(|p| tnsr::read(root.join(p)))
        .collect::<Result<_>>()?;
    let scales: [Tensor; 4] = scales.try_into().expect("four feature paths");
    let features = MultiScaleFeatures::new(scales, annotation.height, annotation.width)?;
    let words: RegionSet = read_json(&root.join(&entry.word_detections))?;
    let lines: RegionSet = read_json(&root.join(&entry.line_detections))?;
    Ok(Scene {
        id: entry.id.clone(),
        split: entry.split,
        annotation,
        features,
        detections: Detections { words, lines },
    })
}

impl From<(Split, SynthScene)> for Scene {
    fn from((split, s): (Split, SynthScene)) -> Self {
        Scene {
            id: s.annotation.image_id.clone(),
            split,
            annotation: s.annotation,
            features: s.features,
            detections: s.detections,
        }
    }
}

/// Builds the dataset in memory, identical to writing then loading it.
pub fn in_memory_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let scenes: Vec<Scene> = generate(cfg)?.into_iter().map(Scene::from).collect();
    Ok(Dataset {
        manifest: Manifest {
            config: cfg.clone(),
            scenes: Vec::new(),
        },
        scenes,
    })
}
