//! Scene records, their JSON-lines format, and the relation contexts drawn from them.

mod embeddings;
mod split;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embeddings::{load_embeddings, write_embeddings, EmbeddingTable};
pub use split::{build_fewshot_split, load_split, rare_predicate_subset, write_split, FewShotSplit};
pub use synth::{generate_synthetic_dataset, predicate_holds, typical_contexts, SynthConfig};

/// Axis-aligned box in pixel coordinates, origin top-left. Serialised as
/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box enclosing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(self.x1.min(other.x1), self.y1.min(other.y1), self.x2.max(other.x2), self.y2.max(other.y2))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// `0 ≤ x1 < x2 ≤ width` and `0 ≤ y1 < y2 ≤ height`, all finite.
    pub fn validate(&self, width: f64, height: f64) -> std::result::Result<(), String> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite {
            return Err(format!("non-finite coordinates {:?}", <[f64; 4]>::from(*self)));
        }
        if !(0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= width) {
            return Err(format!("x range [{}, {}) outside 0..{width} or empty", self.x1, self.x2));
        }
        if !(0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= height) {
            return Err(format!("y range [{}, {}) outside 0..{height} or empty", self.y1, self.y2));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectInstance {
    pub id: i64,
    pub label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationTriplet {
    pub subject_id: i64,
    pub object_id: i64,
    pub predicate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Image path, precomputed feature path, or `"synthetic"` for scenes
    /// rendered from their own object list.
    pub image_source: String,
    pub objects: Vec<ObjectInstance>,
    pub relations: Vec<RelationTriplet>,
}

pub const SYNTHETIC_SOURCE: &str = "synthetic";

impl SceneRecord {
    pub fn object(&self, id: i64) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.image_id.as_str();
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid_scene(id, "width/height", "image dimensions must be positive"));
        }
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(Error::invalid_scene(id, "objects.id", format!("duplicate object id {}", o.id)));
            }
            o.bbox
                .validate(self.width as f64, self.height as f64)
                .map_err(|m| Error::invalid_scene(id, &format!("objects[{}].bbox", o.id), m))?;
        }
        let mut triplets = HashSet::new();
        for (i, r) in self.relations.iter().enumerate() {
            for (field, oid) in [("subject_id", r.subject_id), ("object_id", r.object_id)] {
                if !ids.contains(&oid) {
                    return Err(Error::invalid_scene(
                        id,
                        &format!("relations[{i}].{field}"),
                        format!("object id {oid} not present in scene"),
                    ));
                }
            }
            if r.subject_id == r.object_id {
                return Err(Error::invalid_scene(id, &format!("relations[{i}]"), "subject_id equals object_id"));
            }
            if !triplets.insert((r.subject_id, r.object_id, r.predicate.as_str())) {
                return Err(Error::invalid_scene(id, &format!("relations[{i}]"), "duplicate triplet"));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines scene file. Blank lines are skipped; any malformed or
/// invalid record is an error.
pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[SceneRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(s).expect("scene serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The `<subject, object>` pair of one annotated relation, without its predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextInput {
    pub scene_index: usize,
    pub image_id: String,
    pub relation_index: usize,
    pub image_size: (u32, u32),
    pub subject: ObjectInstance,
    pub object: ObjectInstance,
}

/// One context per annotated relation, in scene then relation order. With
/// `include_predicates` the predicate string is attached; otherwise it is
/// never read.
pub fn iter_contexts(
    scenes: &[SceneRecord],
    include_predicates: bool,
) -> impl Iterator<Item = (ContextInput, Option<String>)> + '_ {
    scenes.iter().enumerate().flat_map(move |(si, scene)| {
        scene.relations.iter().enumerate().map(move |(ri, rel)| {
            let predicate = include_predicates.then(|| rel.predicate.clone());
            (context_of(si, scene, ri), predicate)
        })
    })
}

/// Context of relation `relation_index` of a validated scene.
pub fn context_of(scene_index: usize, scene: &SceneRecord, relation_index: usize) -> ContextInput {
    let rel = &scene.relations[relation_index];
    ContextInput {
        scene_index,
        image_id: scene.image_id.clone(),
        relation_index,
        image_size: (scene.width, scene.height),
        subject: scene.object(rel.subject_id).expect("validated scene").clone(),
        object: scene.object(rel.object_id).expect("validated scene").clone(),
    }
}

/// Predicate → number of annotated relations, sorted by predicate.
pub fn predicate_counts(scenes: &[SceneRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in scenes {
        for r in &s.relations {
            *counts.entry(r.predicate.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Sorted distinct predicates.
pub fn predicate_vocabulary(scenes: &[SceneRecord]) -> Vec<String> {
    predicate_counts(scenes).into_keys().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(id: &str, rels: Vec<(i64, i64, &str)>) -> SceneRecord {
        SceneRecord {
            image_id: id.into(),
            width: 64,
            height: 64,
            image_source: SYNTHETIC_SOURCE.into(),
            objects: vec![
                ObjectInstance { id: 1, label: "a".into(), bbox: BBox::new(0.0, 0.0, 10.0, 10.0) },
                ObjectInstance { id: 2, label: "b".into(), bbox: BBox::new(20.0, 20.0, 30.0, 40.0) },
                ObjectInstance { id: 3, label: "c".into(), bbox: BBox::new(40.0, 0.0, 64.0, 64.0) },
            ],
            relations: rels
                .into_iter()
                .map(|(s, o, p)| RelationTriplet { subject_id: s, object_id: o, predicate: p.into() })
                .collect(),
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_lines(&[]);
        assert!(load_scenes(f.path()).unwrap().is_empty());
    }

    #[test]
    fn two_scenes_preserve_ids_and_round_trip() {
        let scenes = vec![scene("img-a", vec![(1, 2, "left-of")]), scene("img-b", vec![(2, 3, "above")])];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_scenes(f.path(), &scenes).unwrap();
        let loaded = load_scenes(f.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].image_id, "img-a");
        assert_eq!(loaded[1].image_id, "img-b");
        assert_eq!(loaded, scenes);
    }

    #[test]
    fn dangling_object_reference_names_scene() {
        let bad = scene("img-bad", vec![(1, 99, "left-of")]);
        let f = write_lines(&[serde_json::to_string(&bad).unwrap()]);
        let err = load_scenes(f.path()).unwrap_err().to_string();
        assert!(err.contains("img-bad"), "{err}");
        assert!(err.contains("99"), "{err}");
    }

    #[test]
    fn parse_error_reports_line_number() {
        let good = serde_json::to_string(&scene("ok", vec![])).unwrap();
        let f = write_lines(&[good, "{not json".into()]);
        match load_scenes(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let mut dup = scene("dup", vec![(1, 2, "p"), (1, 2, "p")]);
        assert!(dup.validate().is_err());
        dup.relations.pop();
        assert!(dup.validate().is_ok());

        let self_rel = scene("self", vec![(1, 1, "p")]);
        assert!(self_rel.validate().is_err());

        let mut bad_box = scene("box", vec![]);
        bad_box.objects[0].bbox = BBox::new(5.0, 5.0, 5.0, 9.0);
        assert!(bad_box.validate().is_err());
        bad_box.objects[0].bbox = BBox::new(5.0, 5.0, 70.0, 9.0);
        assert!(bad_box.validate().is_err());

        let mut dup_ids = scene("ids", vec![]);
        dup_ids.objects[1].id = 1;
        assert!(dup_ids.validate().is_err());
    }

    #[test]
    fn contexts_with_and_without_predicates() {
        let s = scene("x", vec![(1, 2, "p"), (2, 3, "q"), (3, 1, "r")]);
        let unlabeled: Vec<_> = iter_contexts(std::slice::from_ref(&s), false).collect();
        assert_eq!(unlabeled.len(), 3);
        assert!(unlabeled.iter().all(|(_, p)| p.is_none()));
        let labeled: Vec<_> = iter_contexts(std::slice::from_ref(&s), true).collect();
        let preds: Vec<_> = labeled.iter().map(|(_, p)| p.clone().unwrap()).collect();
        assert_eq!(preds, ["p", "q", "r"]);
        for ((a, _), (b, _)) in unlabeled.iter().zip(&labeled) {
            assert_eq!(a, b);
        }
        let empty = scene("e", vec![]);
        assert_eq!(iter_contexts(std::slice::from_ref(&empty), false).count(), 0);
    }
}
