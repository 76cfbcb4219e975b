//! HierText-style annotation files: `annotations[] → paragraphs[] → lines[]
//! → words[]`, each entity carrying `vertices` as `[[x, y], ...]`.
//!
//! Only geometry is consumed; transcripts and flags are ignored on load.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{downsample_mask, rasterize_polygon, Mask, Polygon};

/// Granularity of the text instances fed to a grouping head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceLevel {
    Word,
    Line,
}

/// Which instances are grouped into which entities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLevel {
    LineToParagraph,
    WordToLine,
    WordToParagraph,
}

impl GroupLevel {
    pub fn instance_level(self) -> InstanceLevel {
        match self {
            GroupLevel::LineToParagraph => InstanceLevel::Line,
            GroupLevel::WordToLine | GroupLevel::WordToParagraph => InstanceLevel::Word,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub vertices: Polygon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    /// Line outline; when absent the line mask is the union of its words.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Polygon>,
    pub words: Vec<Word>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Polygon>,
    pub lines: Vec<Line>,
}

/// Ground truth for one image: a word ⊂ line ⊂ paragraph hierarchy.
#[derive(Debug, Serialize)]
pub struct SceneAnnotation {
    pub image_id: String,
    #[serde(rename = "image_width")]
    pub width: usize,
    #[serde(rename = "image_height")]
    pub height: usize,
    pub paragraphs: Vec<Paragraph>,
    #[serde(skip)]
    word_masks: OnceLock<Vec<Mask>>,
    #[serde(skip)]
    line_masks: OnceLock<Vec<Mask>>,
}

impl Clone for SceneAnnotation {
    fn clone(&self) -> Self {
        Self::new(
            self.image_id.clone(),
            self.height,
            self.width,
            self.paragraphs.clone(),
        )
    }
}

impl PartialEq for SceneAnnotation {
    fn eq(&self, other: &Self) -> bool {
        self.image_id == other.image_id
            && self.height == other.height
            && self.width == other.width
            && self.paragraphs == other.paragraphs
    }
}

impl SceneAnnotation {
    pub fn new(image_id: String, height: usize, width: usize, paragraphs: Vec<Paragraph>) -> Self {
        Self {
            image_id,
            width,
            height,
            paragraphs,
            word_masks: OnceLock::new(),
            line_masks: OnceLock::new(),
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &Word> {
        self.lines().flat_map(|l| l.words.iter())
    }

    pub fn lines(&self) -> impl Iterator<Item = &Line> {
        self.paragraphs.iter().flat_map(|p| p.lines.iter())
    }

    pub fn num_words(&self) -> usize {
        self.words().count()
    }

    pub fn num_lines(&self) -> usize {
        self.lines().count()
    }

    /// Full-resolution instance masks at `level`, in hierarchy order.
    pub fn instance_masks(&self, level: InstanceLevel) -> &[Mask] {
        let (h, w) = (self.height, self.width);
        match level {
            InstanceLevel::Word => self.word_masks.get_or_init(|| {
                self.words()
                    .map(|wd| rasterize_polygon(&wd.vertices, h, w))
                    .collect()
            }),
            InstanceLevel::Line => self.line_masks.get_or_init(|| {
                let words = self.instance_masks(InstanceLevel::Word);
                let mut next_word = 0;
                self.lines()
                    .map(|line| {
                        let members = &words[next_word..next_word + line.words.len()];
                        next_word += line.words.len();
                        match &line.vertices {
                            Some(poly) => rasterize_polygon(poly, h, w),
                            None => Mask::union_all(members).expect("lines hold words"),
                        }
                    })
                    .collect()
            }),
        }
    }

    /// Group index of every instance at the level's instance granularity.
    pub fn group_ids(&self, level: GroupLevel) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut line_idx = 0;
        for (p, para) in self.paragraphs.iter().enumerate() {
            for line in &para.lines {
                match level {
                    GroupLevel::LineToParagraph => ids.push(p),
                    GroupLevel::WordToLine => {
                        ids.extend(std::iter::repeat_n(line_idx, line.words.len()))
                    }
                    GroupLevel::WordToParagraph => {
                        ids.extend(std::iter::repeat_n(p, line.words.len()))
                    }
                }
                line_idx += 1;
            }
        }
        ids
    }

    /// Union of member instance masks for each group, in group order.
    pub fn group_masks(&self, level: GroupLevel) -> Vec<Mask> {
        let masks = self.instance_masks(level.instance_level());
        let ids = self.group_ids(level);
        let groups = ids.iter().max().map_or(0, |m| m + 1);
        let mut out = vec![Mask::empty(self.height, self.width); groups];
        for (m, &g) in masks.iter().zip(&ids) {
            out[g].union_with(m).expect("scene-sized masks");
        }
        out
    }

    /// Paragraph masks as unions of the instances at `level`.
    pub fn paragraph_masks(&self, level: InstanceLevel) -> Vec<Mask> {
        match level {
            InstanceLevel::Line => self.group_masks(GroupLevel::LineToParagraph),
            InstanceLevel::Word => self.group_masks(GroupLevel::WordToParagraph),
        }
    }

    /// Union of all word masks, downsampled by `factor` (max-pool).
    pub fn occupancy(&self, factor: usize) -> Result<Mask> {
        let words = self.instance_masks(InstanceLevel::Word);
        let full = Mask::union_all(words)?;
        downsample_mask(&full, factor)
    }

    fn validate(&self, at: &str) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Schema {
                pointer: at.to_owned(),
                message: "image dims must be positive".into(),
            });
        }
        for (p, para) in self.paragraphs.iter().enumerate() {
            if para.lines.is_empty() {
                return Err(Error::Hierarchy(format!(
                    "{at}/paragraphs/{p} contains no lines"
                )));
            }
            for (l, line) in para.lines.iter().enumerate() {
                if line.words.is_empty() {
                    return Err(Error::Hierarchy(format!(
                        "{at}/paragraphs/{p}/lines/{l} contains no words"
                    )));
                }
                for (w, word) in line.words.iter().enumerate() {
                    if word.vertices.len() < 3 {
                        return Err(Error::Schema {
                            pointer: format!("{at}/paragraphs/{p}/lines/{l}/words/{w}/vertices"),
                            message: "a word outline needs at least 3 vertices".into(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Clamps every vertex into `[0, W] × [0, H]`.
    pub fn clip_to_image(&mut self) {
        let (w, h) = (self.width as f64, self.height as f64);
        let clip = |poly: &mut Polygon| {
            for v in &mut poly.0 {
                v.x = v.x.clamp(0.0, w);
                v.y = v.y.clamp(0.0, h);
            }
        };
        for para in &mut self.paragraphs {
            para.vertices.as_mut().map(clip);
            for line in &mut para.lines {
                line.vertices.as_mut().map(clip);
                for word in &mut line.words {
                    clip(&mut word.vertices);
                }
            }
        }
        self.word_masks = OnceLock::new();
        self.line_masks = OnceLock::new();
    }
}

// Raw document used for parsing; keeps hierarchy violations detectable.
#[derive(Deserialize)]
struct RawFile {
    annotations: Vec<RawScene>,
}

#[derive(Deserialize)]
struct RawScene {
    image_id: String,
    image_width: usize,
    image_height: usize,
    paragraphs: Vec<RawParagraph>,
}

#[derive(Deserialize)]
struct RawParagraph {
    #[serde(default)]
    vertices: Option<Polygon>,
    #[serde(default)]
    lines: Option<Vec<Line>>,
    /// Words placed directly under a paragraph belong to no line.
    #[serde(default)]
    words: Option<Vec<serde_json::Value>>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    annotations: &'a [SceneAnnotation],
}

pub(crate) fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses and validates an annotation document.
pub fn parse_annotations(json: &str) -> Result<Vec<SceneAnnotation>> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let raw: RawFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })?;
    let mut scenes = Vec::with_capacity(raw.annotations.len());
    for (s, rs) in raw.annotations.into_iter().enumerate() {
        let at = format!("/annotations/{s}");
        let mut paragraphs = Vec::with_capacity(rs.paragraphs.len());
        for (p, rp) in rs.paragraphs.into_iter().enumerate() {
            if let Some(words) = rp.words.filter(|w| !w.is_empty()) {
                return Err(Error::Hierarchy(format!(
                    "word {at}/paragraphs/{p}/words/0 is not contained in any line ({} orphan words)",
                    words.len()
                )));
            }
            let lines = rp.lines.ok_or_else(|| Error::Schema {
                pointer: format!("{at}/paragraphs/{p}"),
                message: "missing field `lines`".into(),
            })?;
            paragraphs.push(Paragraph {
                vertices: rp.vertices,
                lines,
            });
        }
        let scene = SceneAnnotation::new(rs.image_id, rs.image_height, rs.image_width, paragraphs);
        scene.validate(&at)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<SceneAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn annotations_to_json(scenes: &[SceneAnnotation]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&FileOut {
        annotations: scenes,
    })?)
}

pub fn save_annotations(path: impl AsRef<Path>, scenes: &[SceneAnnotation]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, annotations_to_json(scenes)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
      "annotations": [{
        "image_id": "a",
        "image_width": 16,
        "image_height": 8,
        "paragraphs": [{
          "vertices": [[0,0],[8,0],[8,4],[0,4]],
          "legible": true,
          "lines": [{
            "vertices": [[0,0],[8,0],[8,4],[0,4]],
            "text": "hi",
            "words": [{"vertices": [[0,0],[8,0],[8,4],[0,4]], "text": "hi", "vertical": false}]
          }]
        }]
      }]
    }"#;

    #[test]
    fn minimal_file_loads() {
        let scenes = parse_annotations(MINIMAL).unwrap();
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        assert_eq!((s.height, s.width), (8, 16));
        assert_eq!(s.num_words(), 1);
        assert_eq!(s.instance_masks(InstanceLevel::Word)[0].area(), 32);
    }

    #[test]
    fn orphan_word_is_named() {
        let bad = r#"{"annotations": [{"image_id": "a", "image_width": 8, "image_height": 8,
            "paragraphs": [{"lines": [], "words": [{"vertices": [[0,0],[1,0],[1,1]]}]}]}]}"#;
        let err = parse_annotations(bad).unwrap_err();
        assert!(matches!(err, Error::Hierarchy(_)));
        assert!(
            err.to_string()
                .contains("/annotations/0/paragraphs/0/words/0"),
            "{err}"
        );
    }

    #[test]
    fn schema_errors_carry_json_pointer() {
        let bad = r#"{"annotations": [{"image_id": "a", "image_width": 8, "image_height": 8,
            "paragraphs": [{"lines": [{"words": [{"vertices": [[0,0],[1,"x"]]}]}]}]}]}"#;
        match parse_annotations(bad).unwrap_err() {
            Error::Schema { pointer, .. } => {
                assert!(
                    pointer.starts_with("/annotations/0/paragraphs/0/lines/0/words/0/vertices"),
                    "{pointer}"
                )
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_annotations("{"), Err(Error::Schema { .. })));
    }

    #[test]
    fn empty_line_is_rejected() {
        let bad = r#"{"annotations": [{"image_id": "a", "image_width": 8, "image_height": 8,
            "paragraphs": [{"lines": [{"words": []}]}]}]}"#;
        assert!(matches!(parse_annotations(bad), Err(Error::Hierarchy(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let scenes = parse_annotations(MINIMAL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        save_annotations(&path, &scenes).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), scenes);
    }

    #[test]
    fn group_ids_follow_hierarchy() {
        let rect = |x: f64| Word {
            vertices: Polygon::rect(x, 0.0, x + 2.0, 2.0),
            text: None,
        };
        let line = |xs: &[f64]| Line {
            vertices: None,
            words: xs.iter().map(|&x| rect(x)).collect(),
        };
        let scene = SceneAnnotation::new(
            "g".into(),
            8,
            32,
            vec![
                Paragraph {
                    vertices: None,
                    lines: vec![line(&[0.0, 3.0]), line(&[6.0])],
                },
                Paragraph {
                    vertices: None,
                    lines: vec![line(&[20.0, 24.0])],
                },
            ],
        );
        assert_eq!(scene.group_ids(GroupLevel::WordToLine), vec![0, 0, 1, 2, 2]);
        assert_eq!(
            scene.group_ids(GroupLevel::WordToParagraph),
            vec![0, 0, 0, 1, 1]
        );
        assert_eq!(scene.group_ids(GroupLevel::LineToParagraph), vec![0, 0, 1]);
        let lines = scene.instance_masks(InstanceLevel::Line);
        assert_eq!(lines[0].area(), 8);
        assert_eq!(scene.group_masks(GroupLevel::WordToParagraph)[0].area(), 12);
    }
}
