//! Annotation ingestion, synthetic scene generation and dataset files.

mod annotation;
mod dataset;
mod synth;

pub use annotation::{
    annotations_to_json, load_annotations, parse_annotations, save_annotations, GroupLevel,
    InstanceLevel, Line, Paragraph, SceneAnnotation, Word,
};
pub use dataset::{
    generate, in_memory_dataset, load_dataset, write_dataset, Dataset, Manifest, Scene, SceneEntry,
    Split, MANIFEST_FILE,
};
pub use synth::{synth_scene, Detections, PxRange, SynthConfig, SynthScene};
