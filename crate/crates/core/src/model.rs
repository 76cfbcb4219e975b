//! End-to-end model: configuration, parameter layout, per-scene
//! preparation, training loss and inference for the single-stage and
//! cascade variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{self, CascadeConfig};
use crate::dataio::{GroupLevel, InstanceLevel, Scene};
use crate::error::{Error, Result};
use crate::geometry::{unify_regions, InstanceMaskSet, RegionSet, UnifyReport};
use crate::grouping_head::{
    group_instances, head_forward, head_loss, AttentionConfig, GroupingConfig, HeadConfig,
    HeadOutputs, LossWeights, MaskLoss, StageLoss,
};
use crate::matching::{assign_groups, match_instances, GroupTargets};
use crate::metrics::Prediction;
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::pixel_embedding::{
    build_pixel_embedding, EmbeddingConfig, EmbeddingMode, PixelEmbedding, EMBED_STRIDE,
};

pub const EMBED_PREFIX: &str = "pe";
pub const HEAD_PREFIX: &str = "sa";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One head grouping detected lines into paragraphs.
    #[default]
    Line,
    /// One head grouping detected words directly into paragraphs.
    Word,
    /// Word head predicting lines, then a line head predicting paragraphs.
    Cascade,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub threshold: f64,
    pub alpha_mask: f64,
    pub alpha_group: f64,
    pub mask_loss: MaskLoss,
    pub enhanced: bool,
    /// When false the fused map is replaced by a single projection of X3.
    pub pixel_embedding: bool,
    pub word_capacity: usize,
    pub line_capacity: usize,
    pub line_threshold: f64,
    pub dedup_iou: f64,
    pub stop_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Line,
            dim: 32,
            layers: 3,
            heads: 4,
            hidden: 512,
            threshold: crate::grouping_head::DEFAULT_THRESHOLD,
            alpha_mask: 1.0,
            alpha_group: 1.0,
            mask_loss: MaskLoss::Dice,
            enhanced: false,
            pixel_embedding: true,
            word_capacity: 32,
            line_capacity: 16,
            line_threshold: 0.5,
            dedup_iou: 0.9,
            stop_gradient: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.head()?.validate()?;
        if self.dim == 0 || self.word_capacity == 0 || self.line_capacity == 0 {
            return Err(Error::Config("dim and capacities must be positive".into()));
        }
        for (name, v) in [
            ("line_threshold", self.line_threshold),
            ("dedup_iou", self.dedup_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
        }
    }

    pub fn head(&self) -> Result<HeadConfig> {
        Ok(HeadConfig {
            attention: self.attention(),
            weights: LossWeights {
                dice: self.alpha_mask,
                group: self.alpha_group,
                detection: 0.0,
            },
            mask_loss: self.mask_loss,
            grouping: GroupingConfig::new(self.threshold)?,
        })
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.dim,
            enhanced: self.enhanced,
            mode: if self.pixel_embedding {
                EmbeddingMode::MultiScale
            } else {
                EmbeddingMode::SingleScale
            },
            activations: true,
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            line_threshold: self.line_threshold,
            dedup_iou: self.dedup_iou,
            stop_gradient: self.stop_gradient,
            line_capacity: self.line_capacity,
        }
    }

    /// Granularity of the detections the model consumes.
    pub fn instance_level(&self) -> InstanceLevel {
        match self.mode {
            Mode::Line => InstanceLevel::Line,
            Mode::Word | Mode::Cascade => InstanceLevel::Word,
        }
    }

    /// Grouping supervised at the first (or only) stage.
    pub fn first_stage_grouping(&self) -> GroupLevel {
        match self.mode {
            Mode::Line => GroupLevel::LineToParagraph,
            Mode::Word => GroupLevel::WordToParagraph,
            Mode::Cascade => GroupLevel::WordToLine,
        }
    }

    pub fn capacity(&self) -> usize {
        match self.instance_level() {
            InstanceLevel::Line => self.line_capacity,
            InstanceLevel::Word => self.word_capacity,
        }
    }

    /// Every parameter name the model reads.
    /// Parameter-name prefixes of each stage. Gradients are clipped per
    /// stage so a noisy later stage cannot starve an earlier one.
    pub fn stage_prefixes(&self) -> Vec<[&'static str; 2]> {
        let mut stages = vec![[EMBED_PREFIX, HEAD_PREFIX]];
        if self.mode == Mode::Cascade {
            stages.push([cascade::LINE_EMBED_PREFIX, cascade::LINE_HEAD_PREFIX]);
        }
        stages
    }

    pub fn param_names(&self) -> Vec<String> {
        let emb = self.embedding();
        let att = self.attention();
        let mut names = emb.param_names(EMBED_PREFIX);
        names.extend(att.param_names(HEAD_PREFIX));
        if self.mode == Mode::Cascade {
            names.extend(emb.param_names(cascade::LINE_EMBED_PREFIX));
            names.extend(att.param_names(cascade::LINE_HEAD_PREFIX));
        }
        names
    }

    /// Fresh parameters for backbone features with `channels` channels.
    pub fn init_params(&self, channels: usize, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let emb = self.embedding();
        let att = self.attention();
        emb.init_params(&mut params, EMBED_PREFIX, channels, &mut rng);
        att.init_params(&mut params, HEAD_PREFIX, &mut rng);
        if self.mode == Mode::Cascade {
            emb.init_params(&mut params, cascade::LINE_EMBED_PREFIX, self.dim, &mut rng);
            att.init_params(&mut params, cascade::LINE_HEAD_PREFIX, &mut rng);
        }
        // checkpoints store f32, so start from values that survive the trip
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let t = params.value_mut(&name).expect("listed param");
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = f64::from(*v as f32));
        }
        Ok(params)
    }
}

/// Per-scene inputs that do not change during training.
#[derive(Clone, Debug)]
pub struct PreparedScene<'a> {
    pub scene: &'a Scene,
    /// Detected instances at full resolution.
    pub instances: InstanceMaskSet,
    /// The same instances at embedding resolution.
    pub small: InstanceMaskSet,
    pub unify: UnifyReport,
    /// First-stage supervision.
    pub targets: GroupTargets,
}

pub fn detections_for(scene: &Scene, level: InstanceLevel) -> &RegionSet {
    match level {
        InstanceLevel::Word => &scene.detections.words,
        InstanceLevel::Line => &scene.detections.lines,
    }
}

pub fn prepare<'a>(scene: &'a Scene, cfg: &ModelConfig) -> Result<PreparedScene<'a>> {
    let ann = &scene.annotation;
    let level = cfg.instance_level();
    let (instances, unify) = unify_regions(
        detections_for(scene, level),
        cfg.capacity(),
        ann.height,
        ann.width,
    )?;
    let small = instances.downsample(EMBED_STRIDE)?;
    let assignment = match_instances(&instances, ann.instance_masks(level))?;
    let targets = assign_groups(&assignment, ann, cfg.first_stage_grouping(), EMBED_STRIDE)?;
    Ok(PreparedScene {
        scene,
        instances,
        small,
        unify,
        targets,
    })
}

/// Training losses recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub first: Option<StageLoss>,
    pub second: Option<StageLoss>,
}

pub fn embed(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
) -> Result<PixelEmbedding> {
    build_pixel_embedding(g, &scene.features, params, EMBED_PREFIX, &cfg.embedding())
}

/// Records the scene's training loss on `g`.
pub fn scene_loss(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    prep: &PreparedScene,
) -> Result<SceneLoss> {
    if prep.small.num_valid() == 0 {
        let total = g.constant(Tensor::scalar(0.0));
        return Ok(SceneLoss {
            total,
            first: None,
            second: None,
        });
    }
    let head = cfg.head()?;
    let embedding = embed(g, params, cfg, prep.scene)?;
    match cfg.mode {
        Mode::Line | Mode::Word => {
            let out = head_forward(
                g,
                params,
                HEAD_PREFIX,
                &head.attention,
                &prep.small,
                &embedding,
            )?;
            let loss = head_loss(g, &out, &prep.targets, &head)?;
            Ok(SceneLoss {
                total: loss.total,
                first: Some(loss),
                second: None,
            })
        }
        Mode::Cascade => {
            let out = cascade::cascade_forward(g, params, cfg, &embedding, &prep.small, None)?;
            let loss = cascade::cascade_loss(g, &out, &prep.targets, &prep.scene.annotation, cfg)?;
            Ok(SceneLoss {
                total: loss.total,
                first: loss.word,
                second: loss.line,
            })
        }
    }
}

/// Inference result for one scene.
#[derive(Clone, Debug)]
pub struct SceneOutput {
    pub prediction: Prediction,
    /// Affinity of the stage that produced the paragraph grouping.
    pub affinity: Option<Tensor>,
    /// Line instances formed by the cascade, as word indices per line.
    pub lines: Option<Vec<Vec<usize>>>,
}

/// Valid full-resolution masks and the slot index each one came from.
fn valid_instances(set: &InstanceMaskSet) -> (Vec<crate::geometry::Mask>, Vec<usize>) {
    let slots: Vec<usize> = (0..set.capacity()).filter(|&i| set.valid[i]).collect();
    (slots.iter().map(|&i| set.masks[i].clone()).collect(), slots)
}

fn reindex(groups: Vec<Vec<usize>>, slots: &[usize]) -> Vec<Vec<usize>> {
    let pos = |s: usize| slots.iter().position(|&x| x == s).expect("valid slot");
    groups
        .into_iter()
        .map(|g| g.into_iter().map(pos).collect())
        .collect()
}

pub fn predict(
    params: &ParamStore,
    cfg: &ModelConfig,
    prep: &PreparedScene,
    grouping: &GroupingConfig,
) -> Result<SceneOutput> {
    let (instances, slots) = valid_instances(&prep.instances);
    if slots.is_empty() {
        return Ok(SceneOutput {
            prediction: Prediction::default(),
            affinity: None,
            lines: None,
        });
    }
    let head = cfg.head()?;
    let mut g = Graph::new();
    let embedding = embed(&mut g, params, cfg, prep.scene)?;
    match cfg.mode {
        Mode::Line | Mode::Word => {
            let out: HeadOutputs = head_forward(
                &mut g,
                params,
                HEAD_PREFIX,
                &head.attention,
                &prep.small,
                &embedding,
            )?;
            let affinity = g.value(out.affinity).clone();
            let groups = group_instances(&affinity, &prep.small.valid, grouping)?;
            Ok(SceneOutput {
                prediction: Prediction {
                    instances,
                    groups: reindex(groups, &slots),
                },
                affinity: Some(affinity),
                lines: None,
            })
        }
        Mode::Cascade => {
            let out = cascade::cascade_forward(&mut g, params, cfg, &embedding, &prep.small, None)?;
            let groups = cascade::word_groups(&g, &out, grouping)?;
            let lines = out.lines.members();
            Ok(SceneOutput {
                prediction: Prediction {
                    instances,
                    groups: reindex(groups, &slots),
                },
                affinity: out.line.map(|o| g.value(o.affinity).clone()),
                lines: Some(reindex(lines, &slots)),
            })
        }
    }
}
