use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predicate_counts, SceneRecord};
use crate::error::{Error, Result};

/// `k` labelled relations per predicate, drawn from training scenes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSplit {
    pub k: usize,
    pub seed: u64,
    /// predicate → `(image_id, relation_index)` pairs, in scene order.
    pub items: BTreeMap<String, Vec<(String, usize)>>,
    /// Predicates with fewer than `k` available relations.
    #[serde(rename = "deficit")]
    pub deficit_report: Vec<String>,
}

impl FewShotSplit {
    pub fn len(&self) -> usize {
        self.items.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(scene_index, relation_index, predicate)` for every item, resolved
    /// against `scenes` by image id.
    pub fn resolve(&self, scenes: &[SceneRecord]) -> Result<Vec<(usize, usize, String)>> {
        let by_id: BTreeMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.image_id.as_str(), i)).collect();
        let mut out = Vec::with_capacity(self.len());
        for (pred, items) in &self.items {
            for (image_id, ri) in items {
                let &si = by_id
                    .get(image_id.as_str())
                    .ok_or_else(|| Error::InvalidArgument(format!("split references unknown image {image_id:?}")))?;
                let rel = scenes[si].relations.get(*ri).ok_or_else(|| {
                    Error::InvalidArgument(format!("split references relation {ri} missing from {image_id:?}"))
                })?;
                if &rel.predicate != pred {
                    return Err(Error::InvalidArgument(format!(
                        "split lists {image_id:?}[{ri}] under {pred:?} but it is annotated {:?}",
                        rel.predicate
                    )));
                }
                out.push((si, *ri, pred.clone()));
            }
        }
        Ok(out)
    }
}

/// Seeded per-predicate uniform sampling without replacement. Predicates are
/// visited in lexicographic order and the selected items are listed in scene
/// order.
pub fn build_fewshot_split(scenes: &[SceneRecord], k: usize, seed: u64) -> Result<FewShotSplit> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut candidates: BTreeMap<&str, Vec<(String, usize)>> = BTreeMap::new();
    for s in scenes {
        for (ri, r) in s.relations.iter().enumerate() {
            candidates.entry(r.predicate.as_str()).or_default().push((s.image_id.clone(), ri));
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("cannot build a few-shot split from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = BTreeMap::new();
    let mut deficit = Vec::new();
    for (pred, pool) in candidates {
        let chosen = if pool.len() <= k {
            deficit.extend((pool.len() < k).then(|| pred.to_string()));
            pool
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i].clone()).collect()
        };
        items.insert(pred.to_string(), chosen);
    }
    Ok(FewShotSplit { k, seed, items, deficit_report: deficit })
}

/// The `n` least frequent predicates, ascending by count, ties broken lexicographically.
pub fn rare_predicate_subset(scenes: &[SceneRecord], n: usize) -> Result<Vec<String>> {
    let counts = predicate_counts(scenes);
    if n > counts.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n} rare predicates but the vocabulary has {}",
            counts.len()
        )));
    }
    let mut by_freq: Vec<(usize, String)> = counts.into_iter().map(|(p, c)| (c, p)).collect();
    by_freq.sort();
    Ok(by_freq.into_iter().take(n).map(|(_, p)| p).collect())
}

pub fn write_split(path: impl AsRef<Path>, split: &FewShotSplit) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(split).expect("split serialises");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<FewShotSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
}
