use serde::{Deserialize, Serialize};

use super::{bezier_to_polygon, extract_instances, rasterize_polygon, BezierRegion, Mask, Polygon};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Raw text-region output of a detector, before unification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSet {
    /// Per-pixel text probability, row-major `height × width`.
    SemanticMap {
        height: usize,
        width: usize,
        values: Vec<f64>,
        threshold: f64,
    },
    InstanceMasks {
        masks: Vec<Mask>,
    },
    Polygons {
        polygons: Vec<Polygon>,
    },
    BezierRegions {
        regions: Vec<BezierRegion>,
        #[serde(default = "default_samples")]
        samples: usize,
    },
}

fn default_samples() -> usize {
    super::DEFAULT_BEZIER_SAMPLES
}

/// Fixed-capacity instance masks; slots past the detected count are empty
/// with `valid == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    pub masks: Vec<Mask>,
    pub valid: Vec<bool>,
}

impl InstanceMaskSet {
    /// Wraps `instances` and pads up to `capacity` with empty masks.
    pub fn padded(
        mut instances: Vec<Mask>,
        capacity: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if instances.len() > capacity {
            return Err(Error::InvalidArgument(format!(
                "{} instances exceed capacity {capacity}",
                instances.len()
            )));
        }
        if let Some(m) = instances.iter().find(|m| m.dims() != (height, width)) {
            return Err(Error::shape(
                "instance mask",
                &[height, width],
                &[m.height(), m.width()],
            ));
        }
        let mut valid = vec![true; instances.len()];
        valid.resize(capacity, false);
        instances.resize_with(capacity, || Mask::empty(height, width));
        Ok(Self {
            masks: instances,
            valid,
        })
    }

    pub fn capacity(&self) -> usize {
        self.masks.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks.first().map_or((0, 0), Mask::dims)
    }

    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            masks: self
                .masks
                .iter()
                .map(|m| downsample_mask(m, factor))
                .collect::<Result<_>>()?,
            valid: self.valid.clone(),
        })
    }

    /// Masks flattened into an N × (H·W) matrix of 0/1 values.
    pub fn to_matrix(&self) -> Tensor {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(self.capacity() * h * w);
        for m in &self.masks {
            data.extend(m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Tensor::new(&[self.capacity(), h * w], data).expect("non-empty set")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnifyReport {
    /// Instances found before truncation.
    pub detected: usize,
    /// Instances dropped because the capacity was exceeded.
    pub truncated: usize,
    /// Regions that rasterized to nothing (degenerate geometry).
    pub degenerate: usize,
}

/// Pixel = 1 iff value ≥ `threshold`.
pub fn binarize_semantic(map: &Tensor, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "binarization threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let [h, w] = map.dims2("binarize_semantic")?;
    Mask::from_bits(h, w, map.data().iter().map(|&v| v >= threshold).collect())
}

/// Max-pool downsampling: a cell is set iff any covered pixel is set.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    let (h, w) = mask.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Mask::empty(oh, ow);
    for (r, c) in mask.pixels() {
        out.set(r / factor, c / factor, true);
    }
    Ok(out)
}

/// Converts any detector representation into `capacity` instance masks.
///
/// When more instances are found than fit, the largest by area are kept
/// (in their original order) and the rest are counted in the report.
pub fn unify_regions(
    regions: &RegionSet,
    capacity: usize,
    height: usize,
    width: usize,
) -> Result<(InstanceMaskSet, UnifyReport)> {
    if capacity == 0 {
        return Err(Error::InvalidArgument(
            "instance capacity must be ≥ 1".into(),
        ));
    }
    let mut report = UnifyReport::default();
    let instances: Vec<Mask> = match regions {
        RegionSet::SemanticMap {
            height: mh,
            width: mw,
            values,
            threshold,
        } => {
            if (*mh, *mw) != (height, width) {
                return Err(Error::shape("semantic map", &[height, width], &[*mh, *mw]));
            }
            if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(
                    "semantic map values must lie in [0, 1]".into(),
                ));
            }
            let map = Tensor::new(&[*mh, *mw], values.clone())?;
            extract_instances(&binarize_semantic(&map, *threshold)?)
        }
        RegionSet::InstanceMasks { masks } => {
            if let Some(m) = masks.iter().find(|m| m.dims() != (height, width)) {
                return Err(Error::shape(
                    "instance mask",
                    &[height, width],
                    &[m.height(), m.width()],
                ));
            }
            masks.clone()
        }
        RegionSet::Polygons { polygons } => {
            rasterize_all(polygons.iter().cloned(), height, width, &mut report)
        }
        RegionSet::BezierRegions { regions, samples } => {
            let polys = regions
                .iter()
                .map(|r| bezier_to_polygon(r, *samples))
                .collect::<Result<Vec<_>>>()?;
            rasterize_all(polys.into_iter(), height, width, &mut report)
        }
    };
    report.detected = instances.len();
    let kept = keep_largest(instances, capacity);
    report.truncated = report.detected - kept.len();
    Ok((
        InstanceMaskSet::padded(kept, capacity, height, width)?,
        report,
    ))
}

fn rasterize_all(
    polys: impl Iterator<Item = Polygon>,
    height: usize,
    width: usize,
    report: &mut UnifyReport,
) -> Vec<Mask> {
    polys
        .filter_map(|p| {
            let m = rasterize_polygon(&p, height, width);
            if m.is_empty() {
                report.degenerate += 1;
                None
            } else {
                Some(m)
            }
        })
        .collect()
}

/// Keeps the `capacity` largest masks, preserving their relative order.
/// Equal areas favour the earlier instance.
fn keep_largest(masks: Vec<Mask>, capacity: usize) -> Vec<Mask> {
    if masks.len() <= capacity {
        return masks;
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(masks[i].area()));
    let mut keep = vec![false; masks.len()];
    for &i in &order[..capacity] {
        keep[i] = true;
    }
    masks
        .into_iter()
        .zip(keep)
        .filter_map(|(m, k)| k.then_some(m))
        .collect()
}
