//! Precision, recall, F1 and panoptic quality at instance and paragraph
//! level.

use serde::{Deserialize, Serialize};

use crate::dataio::{InstanceLevel, SceneAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::matching::{hungarian, CostMatrix};

/// A match counts as a true positive only above this IoU.
pub const TP_IOU: f64 = 0.5;

/// `|a∩b| / |a∪b|`; 0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    crate::geometry::mask_iou(a, b)
}

/// Raw counts; ratios are recomputed from sums (micro-averaging).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp_iou_sum: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl LevelCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp as f64, (self.tp + self.fp) as f64)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        ratio(2.0 * p * r, p + r)
    }

    pub fn mean_tp_iou(&self) -> f64 {
        ratio(self.tp_iou_sum, self.tp as f64)
    }

    pub fn pq(&self) -> f64 {
        self.f1() * self.mean_tp_iou()
    }

    pub fn merge(&mut self, other: &LevelCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp_iou_sum += other.tp_iou_sum;
    }

    pub fn report(&self) -> LevelReport {
        LevelReport {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            pq: self.pq(),
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            mean_tp_iou: self.mean_tp_iou(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mean_tp_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instance: LevelReport,
    pub paragraph: LevelReport,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneCounts {
    pub instance: LevelCounts,
    pub paragraph: LevelCounts,
}

impl SceneCounts {
    pub fn merge(&mut self, other: &SceneCounts) {
        self.instance.merge(&other.instance);
        self.paragraph.merge(&other.paragraph);
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            instance: self.instance.report(),
            paragraph: self.paragraph.report(),
        }
    }
}

/// One-to-one matching maximizing total IoU; pairs above [`TP_IOU`] are
/// true positives.
pub fn match_masks(pred: &[Mask], gt: &[Mask]) -> Result<LevelCounts> {
    let mut ious = vec![0.0; pred.len() * gt.len()];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            ious[i * gt.len() + j] = iou(p, g)?;
        }
    }
    let cost = CostMatrix::from_fn(pred.len(), gt.len(), |i, j| 1.0 - ious[i * gt.len() + j]);
    let assignment = hungarian(&cost)?;
    let mut counts = LevelCounts::default();
    for (i, j) in assignment.pairs() {
        let v = ious[i * gt.len() + j];
        if v > TP_IOU {
            counts.tp += 1;
            counts.tp_iou_sum += v;
        }
    }
    counts.fp = pred.len() - counts.tp;
    counts.fn_ = gt.len() - counts.tp;
    Ok(counts)
}

/// Predicted instances at full resolution and their grouping into
/// paragraphs (indices into `instances`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instances: Vec<Mask>,
    pub groups: Vec<Vec<usize>>,
}

impl Prediction {
    /// Union of member masks per group.
    pub fn paragraph_masks(&self) -> Result<Vec<Mask>> {
        self.groups
            .iter()
            .map(|g| {
                let first = self.instances.get(g[0]).ok_or_else(|| {
                    Error::InvalidArgument(format!("group member {} out of range", g[0]))
                })?;
                let mut m = Mask::empty(first.height(), first.width());
                for &i in g {
                    let inst = self.instances.get(i).ok_or_else(|| {
                        Error::InvalidArgument(format!("group member {i} out of range"))
                    })?;
                    m.union_with(inst)?;
                }
                Ok(m)
            })
            .collect()
    }
}

/// Counts for one scene against the ground truth at `level`; ground-truth
/// paragraphs are unions of that level's instances.
pub fn evaluate(
    pred: &Prediction,
    gt: &SceneAnnotation,
    level: InstanceLevel,
) -> Result<SceneCounts> {
    if pred.groups.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("empty predicted group".into()));
    }
    if let Some(m) = pred
        .instances
        .iter()
        .find(|m| m.dims() != (gt.height, gt.width))
    {
        return Err(Error::shape(
            "evaluate",
            &[gt.height, gt.width],
            &[m.height(), m.width()],
        ));
    }
    Ok(SceneCounts {
        instance: match_masks(&pred.instances, gt.instance_masks(level))?,
        paragraph: match_masks(&pred.paragraph_masks()?, &gt.paragraph_masks(level))?,
    })
}

/// Ground truth restated as a prediction; evaluates to all ones.
pub fn oracle_prediction(gt: &SceneAnnotation, level: InstanceLevel) -> Prediction {
    let instances = gt.instance_masks(level).to_vec();
    let ids = match level {
        InstanceLevel::Line => gt.group_ids(crate::dataio::GroupLevel::LineToParagraph),
        InstanceLevel::Word => gt.group_ids(crate::dataio::GroupLevel::WordToParagraph),
    };
    let mut groups = vec![Vec::new(); gt.paragraphs.len()];
    for (i, &p) in ids.iter().enumerate() {
        groups[p].push(i);
    }
    Prediction { instances, groups }
}
