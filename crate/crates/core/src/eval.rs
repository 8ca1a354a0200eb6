//! Predicate detection metrics: Recall@k with and without graph constraints.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::SceneRecord;
use crate::error::{Error, Result};

pub type PairKey = (String, i64, i64);

/// Score map over predicates for each `(image_id, subject_id, object_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub scores: BTreeMap<PairKey, BTreeMap<String, f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRow {
    image_id: String,
    subject_id: i64,
    object_id: i64,
    scores: BTreeMap<String, f64>,
}

impl PredictionSet {
    pub fn insert(&mut self, image_id: &str, subject_id: i64, object_id: i64, scores: BTreeMap<String, f64>) -> Result<()> {
        if scores.values().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite score for ({image_id}, {subject_id}, {object_id})")));
        }
        let key = (image_id.to_string(), subject_id, object_id);
        if self.scores.insert(key, scores).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate pair ({image_id}, {subject_id}, {object_id})")));
        }
        Ok(())
    }

    pub fn get(&self, image_id: &str, subject_id: i64, object_id: i64) -> Option<&BTreeMap<String, f64>> {
        self.scores.get(&(image_id.to_string(), subject_id, object_id))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// One JSON object per line, pairs in key order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for ((image_id, s, o), scores) in &self.scores {
            let row = PredictionRow { image_id: image_id.clone(), subject_id: *s, object_id: *o, scores: scores.clone() };
            let line = serde_json::to_string(&row).expect("row serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut set = PredictionSet::default();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let row: PredictionRow = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            set.insert(&row.image_id, row.subject_id, row.object_id, row.scores).map_err(|e| parse(e.to_string()))?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall_at_k: f64,
    pub k: usize,
    pub n_gt: usize,
    pub graph_constraints: bool,
    /// predicate → (hits, total)
    pub per_predicate: BTreeMap<String, (usize, usize)>,
    /// `all`, or `rare-<n>` for a rare-predicate subset.
    pub subset: String,
}

impl RecallReport {
    pub fn hits(&self) -> usize {
        self.per_predicate.values().map(|&(h, _)| h).sum()
    }
}

/// Candidate triplet with its score.
#[derive(Debug, Clone)]
struct Candidate<'a> {
    score: f64,
    subject_id: i64,
    object_id: i64,
    predicate: &'a str,
}

/// Higher score first, then `(subject_id, object_id, predicate)` ascending.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.subject_id.cmp(&b.subject_id))
        .then(a.object_id.cmp(&b.object_id))
        .then(a.predicate.cmp(b.predicate))
}

/// Highest-scoring predicate; equal scores go to the smaller name.
pub fn top_predicate(scores: &BTreeMap<String, f64>) -> Option<(&str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for (p, &s) in scores {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((p.as_str(), s));
        }
    }
    best
}

/// Hit flags of every g.t. triplet of `scene`, in relation order.
fn scene_hits(
    scene: &SceneRecord,
    preds: &PredictionSet,
    k: usize,
    graph_constraints: bool,
    keep: &dyn Fn(&str) -> bool,
) -> Result<Vec<Option<bool>>> {
    let mut pairs: BTreeSet<(i64, i64)> = BTreeSet::new();
    for r in &scene.relations {
        if keep(&r.predicate) {
            pairs.insert((r.subject_id, r.object_id));
        }
    }
    let mut filtered: BTreeMap<(i64, i64), BTreeMap<String, f64>> = BTreeMap::new();
    for &(s, o) in &pairs {
        let map = preds.get(&scene.image_id, s, o).ok_or_else(|| Error::MissingScores {
            image_id: scene.image_id.clone(),
            subject_id: s,
            object_id: o,
        })?;
        let m: BTreeMap<String, f64> = map.iter().filter(|(p, _)| keep(p)).map(|(p, &v)| (p.clone(), v)).collect();
        if m.is_empty() {
            return Err(Error::MissingScores { image_id: scene.image_id.clone(), subject_id: s, object_id: o });
        }
        filtered.insert((s, o), m);
    }
    let mut cands: Vec<Candidate> = Vec::new();
    for (&(s, o), m) in &filtered {
        if graph_constraints {
            let (p, score) = top_predicate(m).expect("nonempty");
            cands.push(Candidate { score, subject_id: s, object_id: o, predicate: p });
        } else {
            for (p, &score) in m {
                cands.push(Candidate { score, subject_id: s, object_id: o, predicate: p });
            }
        }
    }
    cands.sort_by(rank);
    cands.truncate(k);
    let kept: BTreeSet<(i64, i64, &str)> = cands.iter().map(|c| (c.subject_id, c.object_id, c.predicate)).collect();
    Ok(scene
        .relations
        .iter()
        .map(|r| keep(&r.predicate).then(|| kept.contains(&(r.subject_id, r.object_id, r.predicate.as_str()))))
        .collect())
}

fn recall_impl(
    preds: &PredictionSet,
    gt: &[SceneRecord],
    k: usize,
    graph_constraints: bool,
    subset: Option<&BTreeSet<String>>,
    tag: String,
) -> Result<RecallReport> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let keep = |p: &str| subset.is_none_or(|s| s.contains(p));
    let mut per_predicate: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for scene in gt {
        let hits = scene_hits(scene, preds, k, graph_constraints, &keep)?;
        for (r, h) in scene.relations.iter().zip(hits) {
            let Some(h) = h else { continue };
            let e = per_predicate.entry(r.predicate.clone()).or_default();
            e.0 += h as usize;
            e.1 += 1;
        }
    }
    let n_gt: usize = per_predicate.values().map(|&(_, t)| t).sum();
    if n_gt == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let hits: usize = per_predicate.values().map(|&(h, _)| h).sum();
    Ok(RecallReport {
        recall_at_k: hits as f64 / n_gt as f64,
        k,
        n_gt,
        graph_constraints,
        per_predicate,
        subset: tag,
    })
}

/// Micro-averaged Recall@k over `gt`. With graph constraints each pair
/// contributes only its top-1 predicate; top-k is taken per image.
pub fn recall_at_k(preds: &PredictionSet, gt: &[SceneRecord], k: usize, graph_constraints: bool) -> Result<RecallReport> {
    recall_impl(preds, gt, k, graph_constraints, None, "all".into())
}

/// As [`recall_at_k`] over only the g.t. triplets whose predicate is in
/// `subset`; pairs without such a triplet are dropped and scores of other
/// predicates are ignored.
pub fn recall_at_k_subset(
    preds: &PredictionSet,
    gt: &[SceneRecord],
    k: usize,
    graph_constraints: bool,
    subset: &[String],
    tag: &str,
) -> Result<RecallReport> {
    let set: BTreeSet<String> = subset.iter().cloned().collect();
    recall_impl(preds, gt, k, graph_constraints, Some(&set), tag.to_string())
}

pub fn per_predicate_recall(preds: &PredictionSet, gt: &[SceneRecord], k: usize) -> Result<BTreeMap<String, f64>> {
    let r = recall_at_k(preds, gt, k, true)?;
    Ok(r.per_predicate.into_iter().map(|(p, (h, t))| (p, h as f64 / t as f64)).collect())
}

/// Fraction of g.t. triplets whose pair's top-1 predicate is the annotated one.
pub fn top1_accuracy(preds: &PredictionSet, gt: &[SceneRecord], subset: Option<&[String]>) -> Result<f64> {
    let set: Option<BTreeSet<&str>> = subset.map(|s| s.iter().map(String::as_str).collect());
    let keep = |p: &str| set.as_ref().is_none_or(|s| s.contains(p));
    let (mut hits, mut total) = (0usize, 0usize);
    for scene in gt {
        for r in scene.relations.iter().filter(|r| keep(&r.predicate)) {
            let map = preds.get(&scene.image_id, r.subject_id, r.object_id).ok_or_else(|| Error::MissingScores {
                image_id: scene.image_id.clone(),
                subject_id: r.subject_id,
                object_id: r.object_id,
            })?;
            let m: BTreeMap<String, f64> = map.iter().filter(|(p, _)| keep(p)).map(|(p, &v)| (p.clone(), v)).collect();
            total += 1;
            if top_predicate(&m).is_some_and(|(p, _)| p == r.predicate) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{BBox, ObjectInstance, RelationTriplet};

    fn scene(id: &str, rels: &[(i64, i64, &str)]) -> SceneRecord {
        let mut ids: BTreeSet<i64> = BTreeSet::new();
        for &(s, o, _) in rels {
            ids.insert(s);
            ids.insert(o);
        }
        SceneRecord {
            image_id: id.into(),
            width: 10,
            height: 10,
            image_source: "synthetic".into(),
            objects: ids
                .into_iter()
                .map(|i| ObjectInstance { id: i, label: "x".into(), bbox: BBox::new(0.0, 0.0, 5.0, 5.0) })
                .collect(),
            relations: rels
                .iter()
                .map(|&(s, o, p)| RelationTriplet { subject_id: s, object_id: o, predicate: p.into() })
                .collect(),
        }
    }

    fn scores(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|&(p, s)| (p.to_string(), s)).collect()
    }

    #[test]
    fn perfect_and_second_ranked() {
        let gt = vec![scene("a", &[(1, 2, "on"), (2, 3, "near")])];
        let mut preds = PredictionSet::default();
        preds.insert("a", 1, 2, scores(&[("on", 0.9), ("near", 0.1)])).unwrap();
        preds.insert("a", 2, 3, scores(&[("on", 0.6), ("near", 0.4)])).unwrap();
        let r = recall_at_k(&preds, &gt, 1000, true).unwrap();
        // "near" is ranked second for its pair: a miss under graph constraints
        assert_eq!(r.recall_at_k, 0.5);
        assert_eq!(r.per_predicate["near"], (0, 1));
        let r = recall_at_k(&preds, &gt, 1000, false).unwrap();
        assert_eq!(r.recall_at_k, 1.0);
        let r = recall_at_k(&preds, &gt, 1, true).unwrap();
        assert_eq!(r.recall_at_k, 0.5);
    }

    #[test]
    fn missing_pair_and_bad_k() {
        let gt = vec![scene("a", &[(1, 2, "on")])];
        let preds = PredictionSet::default();
        assert!(matches!(recall_at_k(&preds, &gt, 5, true), Err(Error::MissingScores { .. })));
        assert!(recall_at_k(&preds, &gt, 0, true).is_err());
    }

    #[test]
    fn subset_filtering() {
        let gt = vec![scene("a", &[(1, 2, "on"), (2, 3, "near")])];
        let mut preds = PredictionSet::default();
        preds.insert("a", 1, 2, scores(&[("on", 0.9), ("near", 0.1)])).unwrap();
        preds.insert("a", 2, 3, scores(&[("on", 0.6), ("near", 0.4)])).unwrap();
        let full = recall_at_k(&preds, &gt, 50, true).unwrap();
        let all = recall_at_k_subset(&preds, &gt, 50, true, &["near".into(), "on".into()], "all").unwrap();
        assert_eq!(full, all);
        let near = recall_at_k_subset(&preds, &gt, 50, true, &["near".into()], "rare-1").unwrap();
        assert_eq!(near.recall_at_k, 1.0);
        assert!(matches!(
            recall_at_k_subset(&preds, &gt, 50, true, &["under".into()], "x"),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn top_predicate_tie_is_lexicographic() {
        assert_eq!(top_predicate(&scores(&[("b", 1.0), ("a", 1.0)])).unwrap().0, "a");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let mut preds = PredictionSet::default();
        preds.insert("a", 1, 2, scores(&[("on", 0.1 + 0.2), ("near", -3.5e-7)])).unwrap();
        preds.insert("b", 4, 2, scores(&[("on", 1.0)])).unwrap();
        preds.write_jsonl(&p).unwrap();
        assert_eq!(PredictionSet::read_jsonl(&p).unwrap(), preds);
    }
}
