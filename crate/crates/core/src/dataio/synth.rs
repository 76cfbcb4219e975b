//! Synthetic hierarchical scenes: axis-aligned word boxes laid out in line
//! rows and paragraph blocks, plus matching backbone feature maps.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with the config
//! seed; scene `i` uses stream `i` so scenes are independent of each other
//! and of the scene count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{Line, Paragraph, SceneAnnotation, Word};
use crate::error::{Error, Result};
use crate::geometry::{downsample_mask, Mask, Point, Polygon, RegionSet};
use crate::numerics::Tensor;
use crate::pixel_embedding::{MultiScaleFeatures, SCALE_FACTORS};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const RESTART_AFTER_MISSES: usize = 50;

/// Inclusive integer range in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PxRange {
    pub min: u32,
    pub max: u32,
}

impl PxRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    fn sample(self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub paragraphs: usize,
    pub lines_per_paragraph: usize,
    pub words_per_line: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub word_height: PxRange,
    pub word_width: PxRange,
    pub word_gap: PxRange,
    pub line_gap: PxRange,
    /// Minimum clearance around every paragraph block.
    pub paragraph_margin: u32,
    /// Backbone channel count C.
    pub channels: usize,
    /// Channels after the occupancy channel; each paragraph raises one of
    /// them, chosen at random, by `style_strength` over its footprint.
    pub style_channels: usize,
    /// Channels after those; each line raises one, distinct within its
    /// paragraph while they last.
    pub line_style_channels: usize,
    pub style_strength: f64,
    pub noise_std: f64,
    /// Max displacement of each detected polygon vertex, in pixels.
    pub detection_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 64,
            eval_scenes: 16,
            paragraphs: 3,
            lines_per_paragraph: 3,
            words_per_line: 3,
            image_height: 128,
            image_width: 128,
            word_height: PxRange::new(6, 10),
            word_width: PxRange::new(6, 14),
            word_gap: PxRange::new(2, 4),
            line_gap: PxRange::new(2, 4),
            paragraph_margin: 12,
            channels: 32,
            style_channels: 4,
            line_style_channels: 3,
            style_strength: 1.0,
            noise_std: 0.3,
            detection_jitter: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.paragraphs == 0 || self.lines_per_paragraph == 0 || self.words_per_line == 0 {
            return bad("paragraph, line and word counts must be at least 1".into());
        }
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % 32 != 0
            || self.image_width % 32 != 0
        {
            return bad(format!(
                "image dims {}x{} must be positive multiples of 32",
                self.image_height, self.image_width
            ));
        }
        for (name, r) in [
            ("word_height", self.word_height),
            ("word_width", self.word_width),
            ("word_gap", self.word_gap),
            ("line_gap", self.line_gap),
        ] {
            if r.min == 0 || r.min > r.max {
                return bad(format!(
                    "{name} range [{}, {}] must satisfy 1 <= min <= max",
                    r.min, r.max
                ));
            }
        }
        if self.channels < 1 + self.style_channels + self.line_style_channels {
            return bad(format!(
                "{} channels cannot hold occupancy plus {} paragraph and {} line style channels",
                self.channels, self.style_channels, self.line_style_channels
            ));
        }
        for (name, v) in [
            ("style_strength", self.style_strength),
            ("noise_std", self.noise_std),
            ("detection_jitter", self.detection_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.eval_scenes
    }
}

/// Detector output for one scene at both granularities.
#[derive(Clone, Debug, PartialEq)]
pub struct Detections {
    pub words: RegionSet,
    pub lines: RegionSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub annotation: SceneAnnotation,
    pub features: MultiScaleFeatures,
    pub detections: Detections,
}

/// Word boxes of one paragraph relative to its block origin.
struct Block {
    width: u32,
    height: u32,
    /// `[line][word] = (x0, y0, x1, y1)`.
    lines: Vec<Vec<(u32, u32, u32, u32)>>,
}

fn sample_block(cfg: &SynthConfig, rng: &mut impl Rng) -> Block {
    let h = cfg.word_height.sample(rng);
    let mut lines = Vec::with_capacity(cfg.lines_per_paragraph);
    let mut y = 0;
    let mut width = 0;
    for l in 0..cfg.lines_per_paragraph {
        if l > 0 {
            y += h + cfg.line_gap.sample(rng);
        }
        let mut x = 0;
        let mut words = Vec::with_capacity(cfg.words_per_line);
        for k in 0..cfg.words_per_line {
            if k > 0 {
                x += cfg.word_gap.sample(rng);
            }
            let w = cfg.word_width.sample(rng);
            words.push((x, y, x + w, y + h));
            x += w;
        }
        width = width.max(x);
        lines.push(words);
    }
    Block {
        width,
        height: y + h,
        lines,
    }
}

fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> Polygon {
    Polygon::rect(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

fn jitter(poly: &Polygon, amount: f64, rng: &mut impl Rng) -> Polygon {
    if amount == 0.0 {
        return poly.clone();
    }
    Polygon::new(
        poly.vertices()
            .iter()
            .map(|p| {
                Point::new(
                    p.x + rng.random_range(-amount..=amount),
                    p.y + rng.random_range(-amount..=amount),
                )
            })
            .collect(),
    )
}

/// Generates scene `index` of the dataset described by `cfg`.
pub fn synth_scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (ih, iw) = (cfg.image_height as u32, cfg.image_width as u32);
    let margin = cfg.paragraph_margin;

    let mut placed: Vec<(u32, u32, Block)> = Vec::with_capacity(cfg.paragraphs);
    let mut attempts = 0;
    let mut misses = 0;
    while placed.len() < cfg.paragraphs {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {} paragraphs in a {}x{} image after {MAX_PLACEMENT_ATTEMPTS} attempts",
                cfg.paragraphs, cfg.image_width, cfg.image_height
            )));
        }
        let block = sample_block(cfg, &mut rng);
        if block.width > iw || block.height > ih {
            continue;
        }
        let x = rng.random_range(0..=iw - block.width);
        let y = rng.random_range(0..=ih - block.height);
        let clear = placed.iter().all(|(px, py, b)| {
            x + block.width + margin <= *px
                || *px + b.width + margin <= x
                || y + block.height + margin <= *py
                || *py + b.height + margin <= y
        });
        if clear {
            placed.push((x, y, block));
            misses = 0;
        } else {
            misses += 1;
            // a crowded partial layout rarely recovers; start over
            if misses == RESTART_AFTER_MISSES {
                placed.clear();
                misses = 0;
            }
        }
    }

    let paragraphs: Vec<Paragraph> = placed
        .iter()
        .map(|(bx, by, block)| {
            let lines = block
                .lines
                .iter()
                .map(|words| {
                    let (x0, y0) = (words[0].0, words[0].1);
                    let (x1, y1) = (words[words.len() - 1].2, words[0].3);
                    Line {
                        vertices: Some(rect(bx + x0, by + y0, bx + x1, by + y1)),
                        words: words
                            .iter()
                            .map(|&(a, b, c, d)| Word {
                                vertices: rect(bx + a, by + b, bx + c, by + d),
                                text: None,
                            })
                            .collect(),
                    }
                })
                .collect();
            Paragraph {
                vertices: Some(rect(*bx, *by, bx + block.width, by + block.height)),
                lines,
            }
        })
        .collect();
    let annotation = SceneAnnotation::new(
        format!("synth_{:05}", index),
        cfg.image_height,
        cfg.image_width,
        paragraphs,
    );

    let features = synth_features(cfg, &annotation, &mut rng)?;
    let words = annotation
        .words()
        .map(|w| jitter(&w.vertices, cfg.detection_jitter, &mut rng))
        .collect();
    let lines = annotation
        .lines()
        .map(|l| {
            jitter(
                l.vertices.as_ref().expect("synthetic lines carry outlines"),
                cfg.detection_jitter,
                &mut rng,
            )
        })
        .collect();
    Ok(SynthScene {
        annotation,
        features,
        detections: Detections {
            words: RegionSet::Polygons { polygons: words },
            lines: RegionSet::Polygons { polygons: lines },
        },
    })
}

/// Values are rounded to f32 so the features survive the TNSR format
/// unchanged.
fn synth_features(
    cfg: &SynthConfig,
    ann: &SceneAnnotation,
    rng: &mut ChaCha8Rng,
) -> Result<MultiScaleFeatures> {
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    // each paragraph lights one paragraph channel and each of its lines one
    // line channel; channels repeat only when they run out
    let word_masks = ann.instance_masks(crate::dataio::InstanceLevel::Word);
    let mut codes: Vec<(Mask, usize)> = Vec::new();
    let mut para_palette: Vec<usize> = (0..cfg.style_channels).collect();
    para_palette.shuffle(rng);
    let mut next = 0;
    for (p, para) in ann.paragraphs.iter().enumerate() {
        let mut line_palette: Vec<usize> = (0..cfg.line_style_channels).collect();
        line_palette.shuffle(rng);
        let start = next;
        for (l, line) in para.lines.iter().enumerate() {
            let m = Mask::union_all(&word_masks[next..next + line.words.len()])?;
            next += line.words.len();
            if !line_palette.is_empty() {
                let k = line_palette[l % line_palette.len()];
                codes.push((m, 1 + cfg.style_channels + k));
            }
        }
        if !para_palette.is_empty() {
            let k = para_palette[p % para_palette.len()];
            codes.push((Mask::union_all(&word_masks[start..next])?, 1 + k));
        }
    }
    let occupancy = Mask::union_all(word_masks)?;

    let c = cfg.channels;
    let mut scales = Vec::with_capacity(4);
    for f in SCALE_FACTORS {
        let (h, w) = (cfg.image_height / f, cfg.image_width / f);
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        let occ = downsample_mask(&occupancy, f)?;
        for (dst, &b) in data[..hw].iter_mut().zip(occ.bits()) {
            *dst = if b { 1.0 } else { 0.0 };
        }
        for (m, ch) in &codes {
            let cells = downsample_mask(m, f)?;
            let plane = &mut data[ch * hw..(ch + 1) * hw];
            for (dst, &b) in plane.iter_mut().zip(cells.bits()) {
                if b {
                    *dst += cfg.style_strength;
                }
            }
        }
        for v in &mut data[hw..] {
            *v += noise.sample(rng);
        }
        for v in &mut data {
            *v = *v as f32 as f64;
        }
        scales.push(Tensor::new(&[c, h, w], data)?);
    }
    let scales: [Tensor; 4] = scales.try_into().expect("four scales");
    MultiScaleFeatures::new(scales, cfg.image_height, cfg.image_width)
}
