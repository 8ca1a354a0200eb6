//! Predicate classifiers on top of the frozen encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataio::{context_of, ContextInput, EmbeddingTable, FewShotSplit, SceneRecord};
use crate::encoder::spatial_features;
use crate::error::{Error, Result};
use crate::eval::PredictionSet;
use crate::layers::Linear;
use crate::model::RelVae;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeature {
    pub vector: Vec<f64>,
    pub image_id: String,
    pub relation_index: usize,
}

/// Runs `f` on a dedicated pool of `jobs` threads, or inline for `jobs <= 1`.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Posterior means of `contexts`, in input order. Each scene's feature map
/// is computed once.
pub fn embed_contexts(
    model: &RelVae,
    scenes: &[SceneRecord],
    contexts: &[ContextInput],
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<ContextFeature>> {
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in contexts.iter().enumerate() {
        if c.scene_index >= scenes.len() {
            return Err(Error::InvalidArgument(format!("context refers to scene {} of {}", c.scene_index, scenes.len())));
        }
        by_scene.entry(c.scene_index).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_scene.into_iter().collect();
    let work = |(si, idx): &(usize, Vec<usize>)| -> Result<Vec<(usize, ContextFeature)>> {
        let map = model.extract(&scenes[*si], base_dir)?;
        idx.iter()
            .map(|&i| {
                let c = &contexts[i];
                let (post, _) = model.encode(c, &map, table)?;
                Ok((i, ContextFeature { vector: post.mu, image_id: c.image_id.clone(), relation_index: c.relation_index }))
            })
            .collect()
    };
    let parts: Vec<Result<Vec<(usize, ContextFeature)>>> =
        with_jobs(jobs, || if jobs > 1 { groups.par_iter().map(work).collect() } else { groups.iter().map(work).collect() })?;
    let mut out: Vec<Option<ContextFeature>> = vec![None; contexts.len()];
    for p in parts {
        for (i, f) in p? {
            out[i] = Some(f);
        }
    }
    Ok(out.into_iter().map(|f| f.expect("every context embedded")).collect())
}

/// Language-and-spatial features `[emb_s, emb_o, spatial]`.
pub fn baseline_features(ctx: &ContextInput, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut v = table.get(&ctx.subject.label)?.to_vec();
    v.extend_from_slice(table.get(&ctx.object.label)?);
    v.extend(spatial_features(&ctx.subject.bbox, &ctx.object.bbox, ctx.image_size)?);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 128, steps: 500, learning_rate: 5e-3, seed: 0 }
    }
}

/// Three affine layers with SiLU between them, on standardised inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub vocabulary: Vec<String>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `(weight [in, out], bias [1, out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

struct HeadNet {
    store: ParamStore,
    layers: Vec<Linear>,
}

impl HeadNet {
    fn forward(&self, g: &mut Graph, x: crate::autodiff::Var) -> crate::autodiff::Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        h
    }
}

impl ClassifierHead {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect()
    }

    /// Raw scores (logits), one per vocabulary entry.
    pub fn predict(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.input_dim() {
            return Err(Error::Shape(format!("feature dim {} != head input {}", feature.len(), self.input_dim())));
        }
        let mut h = Tensor::row_vector(self.standardize(feature));
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w);
            h.add_assign(b);
            if i + 1 < self.layers.len() {
                h = h.map(|v| v * crate::autodiff::sigmoid(v));
            }
        }
        Ok(h.data)
    }

    pub fn score_map(&self, feature: &[f64]) -> Result<BTreeMap<String, f64>> {
        Ok(self.vocabulary.iter().cloned().zip(self.predict(feature)?).collect())
    }
}

/// Full-batch Adam on cross-entropy for `config.steps` steps. The
/// vocabulary is the sorted set of training labels.
pub fn train_head(features: &[Vec<f64>], labels: &[String], config: &HeadConfig) -> Result<ClassifierHead> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features vs {} labels", features.len(), labels.len())));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("features must share one nonzero dimension".into()));
    }
    let vocabulary: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 1.0 }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let dims = [dim, config.hidden, config.hidden, vocabulary.len()];
    let layers: Vec<Linear> =
        (0..3).map(|i| Linear::new(&mut store, &format!("head.{i}"), dims[i], dims[i + 1], &mut rng)).collect();
    let mut net = HeadNet { store, layers };
    let mut head = ClassifierHead { vocabulary, mean, inv_std, layers: Vec::new() };

    let x: Vec<f64> = features.iter().flat_map(|f| head.standardize(f)).collect();
    let x = Tensor::from_vec(n, dim, x);
    let mut onehot = Tensor::zeros(n, head.vocabulary.len());
    for (i, l) in labels.iter().enumerate() {
        let j = head.vocabulary.binary_search(l).expect("label in vocabulary");
        onehot.set(i, j, 1.0 / n as f64);
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &net.store);
    for _ in 0..config.steps {
        let grads = {
            let mut g = Graph::new(&net.store);
            let xv = g.constant(x.clone());
            let logits = net.forward(&mut g, xv);
            let ls = g.log_softmax_rows(logits);
            let t = g.constant(onehot.clone());
            let p = g.mul(ls, t);
            let s = g.sum_all(p);
            let loss = g.scale(s, -1.0);
            g.backward_params(loss).param_grads()
        };
        adam.step(&mut net.store, &grads);
    }
    head.layers = net.layers.iter().map(|l| (net.store.get(l.weight).clone(), net.store.get(l.bias).clone())).collect();
    Ok(head)
}

/// Label of the Euclidean-nearest support point; ties go to the smaller label.
pub fn knn1_predict(support: &[(Vec<f64>, String)], query: &[f64]) -> Result<String> {
    let scores = knn1_scores(support, query)?;
    let (label, _) = crate::eval::top_predicate(&scores).expect("support is nonempty");
    Ok(label.to_string())
}

/// Per-label score `−min distance` to that label's support points.
pub fn knn1_scores(support: &[(Vec<f64>, String)], query: &[f64]) -> Result<BTreeMap<String, f64>> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for (v, l) in support {
        if v.len() != query.len() {
            return Err(Error::Shape(format!("support dim {} != query dim {}", v.len(), query.len())));
        }
        let d = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let e = best.entry(l.clone()).or_insert(f64::INFINITY);
        if d < *e {
            *e = d;
        }
    }
    Ok(best.into_iter().map(|(l, d)| (l, -d)).collect())
}

/// Leave-one-out accuracy of KNN-1 on its own support set.
pub fn knn1_leave_one_out(support: &[(Vec<f64>, String)]) -> Result<f64> {
    if support.len() < 2 {
        return Err(Error::InvalidArgument("leave-one-out needs two support points".into()));
    }
    let mut hits = 0;
    for i in 0..support.len() {
        let rest: Vec<(Vec<f64>, String)> =
            support.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()).collect();
        if knn1_predict(&rest, &support[i].0)? == support[i].1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / support.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Ffn,
    Knn1,
    BaselineLs,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Ffn, HeadKind::Knn1, HeadKind::BaselineLs];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ffn => "ffn",
            HeadKind::Knn1 => "knn1",
            HeadKind::BaselineLs => "baseline-ls",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head {s:?} (expected ffn, knn1 or baseline-ls)")))
    }
}

/// A fitted classifier with the feature type it consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainedHead {
    Ffn { head: ClassifierHead },
    Knn1 { support: Vec<(Vec<f64>, String)> },
    BaselineLs { head: ClassifierHead },
}

impl TrainedHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            TrainedHead::Ffn { .. } => HeadKind::Ffn,
            TrainedHead::Knn1 { .. } => HeadKind::Knn1,
            TrainedHead::BaselineLs { .. } => HeadKind::BaselineLs,
        }
    }

    pub fn scores(&self, feature: &[f64]) -> Result<BTreeMap<String, f64>> {
        match self {
            TrainedHead::Ffn { head } | TrainedHead::BaselineLs { head } => head.score_map(feature),
            TrainedHead::Knn1 { support } => knn1_scores(support, feature),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("head serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 1, msg: e.to_string() })
    }
}

/// Features of `contexts` for a head of `kind`.
pub fn features_for(
    kind: HeadKind,
    model: &RelVae,
    scenes: &[SceneRecord],
    contexts: &[ContextInput],
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    match kind {
        HeadKind::Ffn | HeadKind::Knn1 => {
            Ok(embed_contexts(model, scenes, contexts, table, base_dir, jobs)?.into_iter().map(|f| f.vector).collect())
        }
        HeadKind::BaselineLs => contexts.iter().map(|c| baseline_features(c, table)).collect(),
    }
}

/// Fits a head on the split's items in `train_scenes`.
#[allow(clippy::too_many_arguments)]
pub fn fit_head(
    kind: HeadKind,
    model: &RelVae,
    train_scenes: &[SceneRecord],
    split: &FewShotSplit,
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    config: &HeadConfig,
    jobs: usize,
) -> Result<TrainedHead> {
    let items = split.resolve(train_scenes)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let contexts: Vec<ContextInput> = items.iter().map(|(si, ri, _)| context_of(*si, &train_scenes[*si], *ri)).collect();
    let labels: Vec<String> = items.into_iter().map(|(_, _, p)| p).collect();
    let feats = features_for(kind, model, train_scenes, &contexts, table, base_dir, jobs)?;
    Ok(match kind {
        HeadKind::Ffn => TrainedHead::Ffn { head: train_head(&feats, &labels, config)? },
        HeadKind::BaselineLs => TrainedHead::BaselineLs { head: train_head(&feats, &labels, config)? },
        HeadKind::Knn1 => TrainedHead::Knn1 { support: feats.into_iter().zip(labels).collect() },
    })
}

/// Score maps for every annotated pair of `scenes`.
pub fn predict_scenes(
    head: &TrainedHead,
    model: &RelVae,
    scenes: &[SceneRecord],
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    jobs: usize,
) -> Result<PredictionSet> {
    let mut contexts = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for (ri, r) in scene.relations.iter().enumerate() {
            if seen.insert((r.subject_id, r.object_id)) {
                contexts.push(context_of(si, scene, ri));
            }
        }
    }
    let feats = features_for(head.kind(), model, scenes, &contexts, table, base_dir, jobs)?;
    let mut set = PredictionSet::default();
    for (c, f) in contexts.iter().zip(&feats) {
        set.insert(&c.image_id, c.subject.id, c.object.id, head.scores(f)?)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn knn_cases() {
        let support = vec![(vec![0.0, 0.0], "a".to_string()), (vec![3.0, 0.0], "b".to_string())];
        assert_eq!(knn1_predict(&support, &[3.0, 0.0]).unwrap(), "b");
        assert_eq!(knn1_predict(&support[..1], &[100.0, -4.0]).unwrap(), "a");
        // equidistant: the smaller label
        assert_eq!(knn1_predict(&support, &[1.5, 0.0]).unwrap(), "a");
        assert!(knn1_predict(&[], &[0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(Vec<f64>, String)> =
            (0..20).map(|i| ((0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("p{}", i % 5))).collect();
        for _ in 0..30 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut best = (f64::INFINITY, String::new());
            for (v, l) in &pts {
                let d: f64 = v.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 || (d == best.0 && *l < best.1) {
                    best = (d, l.clone());
                }
            }
            assert_eq!(knn1_predict(&pts, &q).unwrap(), best.1);
        }
    }

    #[test]
    fn head_memorizes_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        let cfg = HeadConfig::default();
        let h = train_head(&feats, &labels, &cfg).unwrap();
        for (f, l) in feats.iter().zip(&labels) {
            let s = h.score_map(f).unwrap();
            assert_eq!(crate::eval::top_predicate(&s).unwrap().0, l);
        }
        assert_eq!(train_head(&feats, &labels, &cfg).unwrap(), h);
        assert!(train_head(&[], &[], &cfg).is_err());
    }

    #[test]
    fn identical_features_cannot_be_separated() {
        let feats = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, 0.0]];
        let labels = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        let h = train_head(&feats, &labels, &HeadConfig::default()).unwrap();
        let p0 = h.predict(&feats[0]).unwrap();
        assert_eq!(p0, h.predict(&feats[1]).unwrap());
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let mut h = train_head(&feats, &["a".into(), "b".into()], &HeadConfig { steps: 0, ..Default::default() }).unwrap();
        for (w, b) in h.layers.iter_mut() {
            w.data.iter_mut().for_each(|v| *v = 0.0);
            b.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let s = h.predict(&[rng.random_range(-1.0..1.0), 0.3]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn knn_leave_one_out() {
        let support = vec![
            (vec![0.0], "a".to_string()),
            (vec![0.1], "a".to_string()),
            (vec![5.0], "b".to_string()),
            (vec![5.1], "b".to_string()),
        ];
        assert_eq!(knn1_leave_one_out(&support).unwrap(), 1.0);
    }
}
