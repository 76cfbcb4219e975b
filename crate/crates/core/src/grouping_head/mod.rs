//! The trainable grouping head: self-attention over instance features,
//! group-mask prediction, affinity prediction and threshold grouping.

mod attention;
mod grouping;
mod losses;

pub use attention::{self_attention_update, AttentionConfig};
pub use grouping::{group_instances, GroupingConfig, UnionFind, DEFAULT_THRESHOLD};
pub use losses::{
    affinity_logits, affinity_loss, affinity_loss_logits, dice_loss, group_mask_logits,
    mask_bce_loss, mask_bce_loss_logits, predict_affinity, predict_group_masks, total_loss,
    LossWeights, MaskLoss, PROB_EPS,
};

use serde::{Deserialize, Serialize};

use crate::assembly::assemble_features;
use crate::error::Result;
use crate::geometry::InstanceMaskSet;
use crate::matching::GroupTargets;
use crate::numerics::{Graph, ParamStore, Var};
use crate::pixel_embedding::PixelEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub attention: AttentionConfig,
    pub weights: LossWeights,
    pub mask_loss: MaskLoss,
    pub grouping: GroupingConfig,
}

impl HeadConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            attention: AttentionConfig::new(dim),
            weights: LossWeights::default(),
            mask_loss: MaskLoss::Dice,
            grouping: GroupingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.weights.validate()
    }
}

/// Head outputs recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// Updated instance features `N × D`.
    pub features: Var,
    /// Group-mask probabilities `N × H'W'`.
    pub group_masks: Var,
    pub group_mask_logits: Var,
    /// Affinity `N × N`.
    pub affinity: Var,
    pub affinity_logits: Var,
}

/// Assembles instance features from `masks` (already at the embedding's
/// resolution) and runs the head.
pub fn head_forward(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    masks: &InstanceMaskSet,
    embedding: &PixelEmbedding,
) -> Result<HeadOutputs> {
    let pooled = assemble_features(g, masks, embedding)?;
    let features = self_attention_update(g, params, prefix, cfg, pooled.features, &pooled.valid)?;
    let group_mask_logits = group_mask_logits(g, features, embedding)?;
    let group_masks = g.sigmoid(group_mask_logits);
    let affinity_logits = affinity_logits(g, features)?;
    let affinity = g.sigmoid(affinity_logits);
    Ok(HeadOutputs {
        features,
        group_masks,
        group_mask_logits,
        affinity,
        affinity_logits,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub mask: Var,
    pub group: Var,
    pub total: Var,
}

pub fn head_loss(
    g: &mut Graph,
    out: &HeadOutputs,
    targets: &GroupTargets,
    cfg: &HeadConfig,
) -> Result<StageLoss> {
    let mask = match cfg.mask_loss {
        MaskLoss::Dice => dice_loss(g, out.group_masks, targets)?,
        MaskLoss::Bce => mask_bce_loss_logits(g, out.group_mask_logits, targets)?,
        MaskLoss::Both => {
            let d = dice_loss(g, out.group_masks, targets)?;
            let b = mask_bce_loss_logits(g, out.group_mask_logits, targets)?;
            g.add(d, b)?
        }
    };
    let group = affinity_loss_logits(g, out.affinity_logits, targets)?;
    let total = total_loss(g, mask, group, &cfg.weights)?;
    Ok(StageLoss { mask, group, total })
}
