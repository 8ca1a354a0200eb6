//! Generative network `p(context | z, image)`.
//!
//! The semantic heads read `z` only. The visual heads turn `z` into two
//! queries that attend over the target image's patches, yielding the
//! grounded features and the subject/object heatmaps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataio::EmbeddingTable;
use crate::encoder::IdentityCrossAttention;
use crate::error::{Error, Result};
use crate::layers::Mlp2;
use crate::params::ParamStore;
use crate::tensor::{dot, l2_norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedContext {
    pub sem_s: Vec<f64>,
    pub sem_o: Vec<f64>,
    pub vis_s: Vec<f64>,
    pub vis_o: Vec<f64>,
    pub heat_s: Vec<f64>,
    pub heat_o: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub latent_dim: usize,
    pub emb_dim: usize,
    pub channels: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub key_extra_dim: usize,
}

pub struct DecoderVars {
    /// `[1, D_emb]` each.
    pub sem_s: Var,
    pub sem_o: Var,
    /// `[2, C]`, subject row then object row.
    pub visual: Var,
    /// `[2, P]`
    pub heatmaps: Var,
    /// `[2, P]` pre-softmax scores, for the sigmoid variant of the box loss.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dims: DecoderDims,
    pub sem_s: Mlp2,
    pub sem_o: Mlp2,
    pub query_s: Mlp2,
    pub query_o: Mlp2,
    pub attention: IdentityCrossAttention,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dims: DecoderDims, rng: &mut impl Rng) -> Self {
        let sem = [dims.latent_dim, dims.hidden, dims.emb_dim];
        let query = [dims.latent_dim, dims.hidden, dims.channels];
        Self {
            dims,
            sem_s: Mlp2::new(store, "decoder.sem_s", sem, rng),
            sem_o: Mlp2::new(store, "decoder.sem_o", sem, rng),
            query_s: Mlp2::new(store, "decoder.query_s", query, rng),
            query_o: Mlp2::new(store, "decoder.query_o", query, rng),
            attention: IdentityCrossAttention::new(
                store,
                "decoder.attention",
                dims.channels,
                dims.channels,
                dims.key_extra_dim,
                dims.attn_dim,
                dims.heads,
                rng,
            ),
        }
    }

    /// Semantic predictions only; `z: [1, D_z]`.
    pub fn semantics(&self, g: &mut Graph, z: Var) -> (Var, Var) {
        (self.sem_s.forward(g, z), self.sem_o.forward(g, z))
    }

    pub fn forward(&self, g: &mut Graph, z: Var, feat: Var, key_extra: Option<Var>) -> DecoderVars {
        let (sem_s, sem_o) = self.semantics(g, z);
        let q_s = self.query_s.forward(g, z);
        let q_o = self.query_o.forward(g, z);
        let queries = g.concat_rows(&[q_s, q_o]);
        let att = self.attention.forward(g, queries, feat, key_extra);
        DecoderVars { sem_s, sem_o, visual: att.outputs, heatmaps: att.heatmaps, logits: att.logits }
    }
}

/// Cosine distance `1 − cos(a, b)`; `None` when either side has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(1.0 - dot(a, b) / (na * nb))
}

/// Closest table label by cosine distance; ties go to the smaller label.
pub fn nearest_label(sem: &[f64], table: &EmbeddingTable) -> Result<(String, f64)> {
    if sem.len() != table.dim() {
        return Err(Error::Shape(format!("embedding dim {} != table dim {}", sem.len(), table.dim())));
    }
    if l2_norm(sem) == 0.0 || !sem.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("prediction has zero norm".into()));
    }
    let mut best: Option<(&str, f64)> = None;
    // table iterates in label order, so strict `<` keeps the smallest tied label
    for (label, v) in table.iter() {
        let d = cosine_distance(sem, v).expect("table vectors are nonzero");
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((label, d));
        }
    }
    let (label, d) = best.ok_or_else(|| Error::Embedding("empty embedding table".into()))?;
    Ok((label.to_string(), d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_label_exact_and_antipodal() {
        let mut table = EmbeddingTable::new(3);
        table.insert("man", vec![1.0, 0.0, 0.0]).unwrap();
        table.insert("shirt", vec![0.0, 1.0, 0.0]).unwrap();
        table.insert("hat", vec![0.0, 0.0, 2.0]).unwrap();
        assert_eq!(nearest_label(&[3.0, 0.0, 0.0], &table).unwrap(), ("man".into(), 0.0));
        let (l, d) = nearest_label(&[-1.0, 0.0, 0.0], &table).unwrap();
        // both orthogonal labels are at distance 1; "hat" wins the tie
        assert_eq!((l.as_str(), d), ("hat", 1.0));
        assert!(nearest_label(&[0.0; 3], &table).is_err());
        assert!(nearest_label(&[1.0; 2], &table).is_err());
    }

    #[test]
    fn nearest_label_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
        let table = EmbeddingTable::synthetic(labels.iter().map(String::as_str), 6);
        for _ in 0..50 {
            let sem: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut best = (String::new(), f64::INFINITY);
            for l in &labels {
                let v = table.get(l).unwrap();
                let c = v.iter().zip(&sem).map(|(a, b)| a * b).sum::<f64>()
                    / (v.iter().map(|a| a * a).sum::<f64>().sqrt() * sem.iter().map(|a| a * a).sum::<f64>().sqrt());
                if 1.0 - c < best.1 {
                    best = (l.clone(), 1.0 - c);
                }
            }
            let got = nearest_label(&sem, &table).unwrap();
            assert_eq!(got.0, best.0);
            assert!((got.1 - best.1).abs() < 1e-12);
        }
    }
}
