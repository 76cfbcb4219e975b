use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use tga_core::checkpoint::Checkpoint;
use tga_core::dataio::{load_dataset, write_dataset, Dataset, Scene, Split, SynthConfig};
use tga_core::geometry::{trace_outer_contour, Polygon};
use tga_core::grouping_head::GroupingConfig;
use tga_core::model::{predict, prepare, Mode};
use tga_core::training::{evaluate_scenes, loss_csv, train as run_training, RunConfig};

use crate::error::{CliError, CliResult};
use crate::{svg, EvalArgs, GenArgs, InferArgs, SplitArg, TrainArgs};

const LOSS_LOG: &str = "loss.csv";
const RUN_CONFIG: &str = "run.json";

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Backbone channels shared by every scene.
fn dataset_channels(data: &Dataset) -> CliResult<usize> {
    let mut channels = data
        .scenes
        .iter()
        .map(|s| (s.id.as_str(), s.features.channels()));
    let Some((_, c)) = channels.next() else {
        return Err(CliError::Data("dataset holds no scenes".into()));
    };
    match channels.find(|&(_, other)| other != c) {
        Some((id, other)) => Err(CliError::Data(format!(
            "scene {id} has {other} feature channels, earlier scenes have {c}"
        ))),
        None => Ok(c),
    }
}

fn check_compatible(data: &Dataset, ckpt: &Checkpoint) -> CliResult<()> {
    let c = dataset_channels(data)?;
    if c != ckpt.channels {
        return Err(CliError::Data(format!(
            "checkpoint expects {} feature channels, dataset has {c}",
            ckpt.channels
        )));
    }
    Ok(())
}

/// A run config given alongside a checkpoint must describe the same model.
fn check_config(path: Option<&Path>, ckpt: &Checkpoint) -> CliResult<()> {
    let Some(path) = path else {
        return Ok(());
    };
    let cfg: RunConfig = read_config(Some(path))?;
    cfg.validate()?;
    if cfg.model.mode != ckpt.model.mode {
        return Err(CliError::Data(format!(
            "{} describes a {:?} model, checkpoint holds {:?}",
            path.display(),
            cfg.model.mode,
            ckpt.model.mode
        )));
    }
    let expected = Checkpoint {
        model: cfg.model,
        channels: ckpt.channels,
        params: ckpt.params.clone(),
    };
    expected.validate().map_err(|e| {
        CliError::Data(format!(
            "{} disagrees with the checkpoint: {e}",
            path.display()
        ))
    })
}

fn load_for_inference(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
) -> CliResult<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_config(config, &ckpt)?;
    let data = load_dataset(data)?;
    check_compatible(&data, &ckpt)?;
    Ok((ckpt, data))
}

pub fn gen(a: &GenArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = write_dataset(&a.out, &cfg)?;
    eprintln!(
        "wrote {} scenes to {}",
        manifest.scenes.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg: RunConfig = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if a.no_gmp {
        cfg.model.alpha_mask = 0.0;
    }
    if a.no_pixel_embedding {
        cfg.model.pixel_embedding = false;
    }
    if let Some(m) = a.mask_loss {
        cfg.model.mask_loss = m.into();
    }
    if a.cascade {
        cfg.model.mode = Mode::Cascade;
    } else if a.word {
        cfg.model.mode = Mode::Word;
    }
    if let Some(dim) = a.dim {
        cfg.model.dim = dim;
    }
    cfg.validate()?;
    if a.out.is_file() {
        return Err(CliError::Data(format!(
            "{} is a file, not a directory",
            a.out.display()
        )));
    }

    let data = load_dataset(&a.data)?;
    let channels = dataset_channels(&data)?;
    let scenes: Vec<&Scene> = data.split(Split::Train).collect();
    if scenes.is_empty() {
        return Err(CliError::Data("dataset has no training scenes".into()));
    }
    let init = cfg.model.init_params(channels, cfg.train.seed)?;
    let every = (cfg.train.steps / 10).max(1);
    let (params, log) = run_training(&scenes, &cfg, init, a.workers as usize, |r| {
        if r.step % every == 0 || r.step + 1 == cfg.train.steps {
            eprintln!(
                "step {:>5}  loss {:.4}  mask {:.4}  group {:.4}",
                r.step, r.loss, r.mask, r.group
            );
        }
    })?;

    let ckpt = Checkpoint {
        model: cfg.model.clone(),
        channels,
        params,
    };
    ckpt.save(&a.out)?;
    let log_path = a.loss_log.clone().unwrap_or_else(|| a.out.join(LOSS_LOG));
    write_output(&log_path, &loss_csv(&log))?;
    let run = serde_json::to_string_pretty(&cfg).map_err(tga_core::Error::from)?;
    write_output(&a.out.join(RUN_CONFIG), &(run + "\n"))?;
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct InstanceOutput {
    area: usize,
    /// Outer contour in pixel-corner coordinates.
    polygon: Polygon,
}

#[derive(Serialize)]
struct InferenceOutput<'a> {
    scene: &'a str,
    mode: Mode,
    threshold: f64,
    instances: Vec<InstanceOutput>,
    groups: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lines: Option<Vec<Vec<usize>>>,
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let (ckpt, data) = load_for_inference(&a.checkpoint, &a.data, a.config.as_deref())?;
    let scene = match &a.scene {
        Some(id) => data
            .scenes
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| CliError::Data(format!("no scene {id} in the dataset")))?,
        None => &data.scenes[0],
    };
    let threshold = a.threshold.unwrap_or(ckpt.model.threshold);
    let grouping = GroupingConfig::new(threshold)?;
    let prep = prepare(scene, &ckpt.model)?;
    let out = predict(&ckpt.params, &ckpt.model, &prep, &grouping)?;

    let instances: Vec<InstanceOutput> = out
        .prediction
        .instances
        .iter()
        .map(|m| InstanceOutput {
            area: m.area(),
            polygon: trace_outer_contour(m),
        })
        .collect();
    let overlay = a.svg.as_ref().map(|_| {
        let polygons: Vec<&Polygon> = instances.iter().map(|i| &i.polygon).collect();
        svg::group_overlay(
            scene.annotation.width,
            scene.annotation.height,
            &polygons,
            &out.prediction.groups,
        )
    });
    let report = InferenceOutput {
        scene: &scene.id,
        mode: ckpt.model.mode,
        threshold,
        instances,
        groups: out.prediction.groups.clone(),
        lines: out.lines,
    };
    let json = serde_json::to_string_pretty(&report).map_err(tga_core::Error::from)? + "\n";

    match &a.out {
        Some(path) => write_output(path, &json)?,
        None => print!("{json}"),
    }
    if let (Some(path), Some(svg)) = (&a.svg, overlay) {
        write_output(path, &svg)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let (ckpt, data) = load_for_inference(&a.checkpoint, &a.data, a.config.as_deref())?;
    let scenes: Vec<&Scene> = match a.split {
        SplitArg::Train => data.split(Split::Train).collect(),
        SplitArg::Eval => data.split(Split::Eval).collect(),
        SplitArg::All => data.scenes.iter().collect(),
    };
    if scenes.is_empty() {
        return Err(CliError::Data(format!(
            "no scenes in the {:?} split",
            a.split
        )));
    }
    let grouping = GroupingConfig::new(a.threshold.unwrap_or(ckpt.model.threshold))?;
    let report = evaluate_scenes(
        &scenes,
        &ckpt.params,
        &ckpt.model,
        &grouping,
        a.workers as usize,
    )?;
    let json = serde_json::to_string_pretty(&report).map_err(tga_core::Error::from)? + "\n";
    match &a.report {
        Some(path) => write_output(path, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
