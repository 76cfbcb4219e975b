//! Two-stage grouping: a word head predicts line masks, which become the
//! instances of a line head that predicts paragraphs.

use crate::dataio::{GroupLevel, InstanceLevel, SceneAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{downsample_mask, mask_iou, InstanceMaskSet, Mask};
use crate::grouping_head::{
    group_instances, head_forward, head_loss, GroupingConfig, HeadOutputs, StageLoss,
};
use crate::matching::{assign_groups, match_instances, Assignment, GroupTargets};
use crate::model::{ModelConfig, HEAD_PREFIX};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::pixel_embedding::{fuse_branches, PixelEmbedding, Resample, EMBED_STRIDE};

pub const LINE_EMBED_PREFIX: &str = "pe_line";
pub const LINE_HEAD_PREFIX: &str = "sa_line";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Word-stage line probabilities at or above this become line pixels.
    pub line_threshold: f64,
    /// Predicted line masks this similar collapse into one line instance.
    pub dedup_iou: f64,
    /// Detach the word stage's branch features before the line stage.
    pub stop_gradient: bool,
    pub line_capacity: usize,
}

/// Line instances at embedding resolution, with each word slot's line.
#[derive(Clone, Debug, PartialEq)]
pub struct LineInstances {
    pub masks: InstanceMaskSet,
    pub word_to_line: Vec<Option<usize>>,
}

impl LineInstances {
    /// Word slots per valid line slot.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.masks.capacity()];
        for (w, l) in self.word_to_line.iter().enumerate() {
            if let Some(l) = *l {
                out[l].push(w);
            }
        }
        out.into_iter()
            .zip(&self.masks.valid)
            .filter(|(_, &v)| v)
            .map(|(m, _)| m)
            .collect()
    }

    /// Ground-truth lines in place of predicted ones. Word slot `i` joins the
    /// line of the ground-truth word it is matched to.
    pub fn oracle(
        annotation: &SceneAnnotation,
        words: &Assignment,
        capacity: usize,
    ) -> Result<Self> {
        let lines = annotation
            .instance_masks(InstanceLevel::Line)
            .iter()
            .map(|m| downsample_mask(m, EMBED_STRIDE))
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = lines.first().map_or((0, 0), Mask::dims);
        let line_of = annotation.group_ids(GroupLevel::WordToLine);
        Ok(Self {
            masks: InstanceMaskSet::padded(lines, capacity, h, w)?,
            word_to_line: words
                .targets()
                .iter()
                .map(|t| t.map(|g| line_of[g]))
                .collect(),
        })
    }
}

/// Binarizes each valid word's predicted line mask and merges near-duplicates
/// in word order. An empty prediction falls back to the word's own mask.
/// Words whose line would exceed the capacity are left without a line.
pub fn derive_line_instances(
    line_probs: &Tensor,
    words: &InstanceMaskSet,
    cfg: &CascadeConfig,
) -> Result<LineInstances> {
    let (h, w) = words.dims();
    let [n, hw] = line_probs.dims2("derive_line_instances")?;
    if n != words.capacity() || hw != h * w {
        return Err(Error::shape(
            "derive_line_instances",
            line_probs.dims(),
            &[words.capacity(), h * w],
        ));
    }
    let mut lines: Vec<Mask> = Vec::new();
    let mut word_to_line = vec![None; n];
    for i in (0..n).filter(|&i| words.valid[i]) {
        let row = line_probs.row(i);
        let mut m = Mask::from_fn(h, w, |r, c| row[r * w + c] >= cfg.line_threshold);
        if m.is_empty() {
            m = words.masks[i].clone();
        }
        let mut found = None;
        for (j, l) in lines.iter().enumerate() {
            if mask_iou(&m, l)? >= cfg.dedup_iou {
                found = Some(j);
                break;
            }
        }
        word_to_line[i] = match found {
            Some(j) => Some(j),
            None if lines.len() < cfg.line_capacity => {
                lines.push(m);
                Some(lines.len() - 1)
            }
            None => None,
        };
    }
    Ok(LineInstances {
        masks: InstanceMaskSet::padded(lines, cfg.line_capacity, h, w)?,
        word_to_line,
    })
}

/// Cascade outputs recorded on a graph; the heads are absent when there are
/// no valid words.
#[derive(Clone, Debug)]
pub struct CascadeOutputs {
    pub word_valid: Vec<bool>,
    pub word: Option<HeadOutputs>,
    pub lines: LineInstances,
    pub line: Option<HeadOutputs>,
    pub line_embedding: Option<PixelEmbedding>,
}

/// Runs both stages. `oracle_lines` replaces the word stage's line
/// predictions.
pub fn cascade_forward(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    embedding: &PixelEmbedding,
    words: &InstanceMaskSet,
    oracle_lines: Option<LineInstances>,
) -> Result<CascadeOutputs> {
    let cc = cfg.cascade();
    let att = cfg.attention();
    if words.num_valid() == 0 {
        let (h, w) = words.dims();
        return Ok(CascadeOutputs {
            word_valid: words.valid.clone(),
            word: None,
            lines: LineInstances {
                masks: InstanceMaskSet::padded(Vec::new(), cc.line_capacity, h, w)?,
                word_to_line: vec![None; words.capacity()],
            },
            line: None,
            line_embedding: None,
        });
    }
    let word = head_forward(g, params, HEAD_PREFIX, &att, words, embedding)?;
    let lines = match oracle_lines {
        Some(l) => l,
        None => derive_line_instances(g.value(word.group_masks), words, &cc)?,
    };
    let inputs: Vec<(Var, Resample)> = embedding
        .branches
        .iter()
        .map(|&b| {
            (
                if cc.stop_gradient { g.detach(b) } else { b },
                Resample::Identity,
            )
        })
        .collect();
    let line_embedding = fuse_branches(g, params, LINE_EMBED_PREFIX, &cfg.embedding(), &inputs)?;
    let line = if lines.masks.num_valid() > 0 {
        Some(head_forward(
            g,
            params,
            LINE_HEAD_PREFIX,
            &att,
            &lines.masks,
            &line_embedding,
        )?)
    } else {
        None
    };
    Ok(CascadeOutputs {
        word_valid: words.valid.clone(),
        word: Some(word),
        lines,
        line,
        line_embedding: Some(line_embedding),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CascadeLoss {
    pub word: Option<StageLoss>,
    pub line: Option<StageLoss>,
    pub total: Var,
}

/// Line-stage supervision: line instances matched to ground-truth lines,
/// lifted to paragraph masks.
pub fn line_targets(lines: &InstanceMaskSet, annotation: &SceneAnnotation) -> Result<GroupTargets> {
    let gt = annotation
        .instance_masks(InstanceLevel::Line)
        .iter()
        .map(|m| downsample_mask(m, EMBED_STRIDE))
        .collect::<Result<Vec<_>>>()?;
    let assignment = match_instances(lines, &gt)?;
    assign_groups(
        &assignment,
        annotation,
        GroupLevel::LineToParagraph,
        EMBED_STRIDE,
    )
}

/// Sum of both stages' losses. `word_targets` supervise the word stage with
/// line masks.
pub fn cascade_loss(
    g: &mut Graph,
    out: &CascadeOutputs,
    word_targets: &GroupTargets,
    annotation: &SceneAnnotation,
    cfg: &ModelConfig,
) -> Result<CascadeLoss> {
    let head = cfg.head()?;
    let mut total = g.constant(Tensor::scalar(0.0));
    let word = match &out.word {
        Some(o) => {
            let l = head_loss(g, o, word_targets, &head)?;
            total = g.add(total, l.total)?;
            Some(l)
        }
        None => None,
    };
    let line = match &out.line {
        Some(o) => {
            let targets = line_targets(&out.lines.masks, annotation)?;
            let l = head_loss(g, o, &targets, &head)?;
            total = g.add(total, l.total)?;
            Some(l)
        }
        None => None,
    };
    Ok(CascadeLoss { word, line, total })
}

/// Paragraph groups over word slots: line groups from the line head's
/// affinity, expanded to their words. Words without a line stay alone.
pub fn word_groups(
    g: &Graph,
    out: &CascadeOutputs,
    grouping: &GroupingConfig,
) -> Result<Vec<Vec<usize>>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    if let Some(line) = &out.line {
        let line_groups =
            group_instances(g.value(line.affinity), &out.lines.masks.valid, grouping)?;
        groups.extend(expand_line_groups(&out.lines, &line_groups));
    }
    for (w, l) in out.lines.word_to_line.iter().enumerate() {
        if l.is_none() && out.word_valid[w] {
            groups.push(vec![w]);
        }
    }
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

/// Replaces each line slot in `line_groups` by its words.
fn expand_line_groups(lines: &LineInstances, line_groups: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); lines.masks.capacity()];
    for (w, l) in lines.word_to_line.iter().enumerate() {
        if let Some(l) = *l {
            members[l].push(w);
        }
    }
    let mut groups = Vec::new();
    for lg in line_groups {
        let mut words: Vec<usize> = lg
            .iter()
            .flat_map(|&l| members[l].iter().copied())
            .collect();
        if !words.is_empty() {
            words.sort_unstable();
            groups.push(words);
        }
    }
    groups
}
