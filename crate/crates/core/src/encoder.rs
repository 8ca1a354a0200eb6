//! Posterior network `q(z | context, image)`.
//!
//! Per entity: the image map is gated by compatibility with the entity's
//! word vector, the gated map is averaged inside the entity's box mask, and
//! the two resulting entity features query the patch sequence through an
//! attention whose values are the raw patch features. Enriched features,
//! word vectors and box geometry are fused into the posterior parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataio::{BBox, ContextInput, EmbeddingTable};
use crate::error::{Error, Result};
use crate::features::{bbox_to_mask, BinaryMask, ImageFeatureMap};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const SPATIAL_DIM: usize = 14;
/// Per-entity slice of the spatial features appended to attention queries.
pub const ENTITY_BOX_DIM: usize = 4;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `[n_queries, C]`, the heatmap-weighted average of the patch features.
    pub outputs: Tensor,
    /// `[n_queries, P]`, each row a distribution over patches.
    pub heatmaps: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

/// `z = mu + exp(logvar / 2) ⊙ ε`, `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(p: &PosteriorParams, rng: &mut impl Rng) -> LatentCode {
    let z = p
        .mu
        .iter()
        .zip(&p.logvar)
        .map(|(&m, &lv)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + (0.5 * lv).exp() * eps
        })
        .collect();
    LatentCode { z }
}

/// Box geometry of a `(subject, object)` pair, normalised by the image:
/// subject `(cx, cy, w, h)`, object `(cx, cy, w, h)`, centre delta over the
/// image diagonal, `ln(w_s/w_o)`, `ln(h_s/h_o)`, IoU, and enclosing-box area.
pub fn spatial_features(b_s: &BBox, b_o: &BBox, image_size: (u32, u32)) -> Result<[f64; SPATIAL_DIM]> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    for b in [b_s, b_o] {
        if b.width() <= 0.0 || b.height() <= 0.0 {
            return Err(Error::InvalidArgument(format!("degenerate box {:?}", <[f64; 4]>::from(*b))));
        }
    }
    let diag = (w * w + h * h).sqrt();
    let (sx, sy) = b_s.center();
    let (ox, oy) = b_o.center();
    let union = b_s.union(b_o);
    Ok([
        sx / w,
        sy / h,
        b_s.width() / w,
        b_s.height() / h,
        ox / w,
        oy / h,
        b_o.width() / w,
        b_o.height() / h,
        (sx - ox) / diag,
        (sy - oy) / diag,
        (b_s.width() / b_o.width()).ln(),
        (b_s.height() / b_o.height()).ln(),
        b_s.iou(b_o),
        union.area() / (w * h),
    ])
}

/// Fixed 2-D Fourier positional code per patch: for each axis and
/// `k = 1..=freqs`, `sin(πk·u)` and `cos(πk·u)` at the cell centre `u ∈ (0, 1)`.
/// Width is `4·freqs` whatever the grid.
pub fn positional_encoding(grid_h: usize, grid_w: usize, freqs: usize) -> Tensor {
    let mut t = Tensor::zeros(grid_h * grid_w, 4 * freqs);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = t.row_mut(r * grid_w + c);
            let (u, v) = ((c as f64 + 0.5) / grid_w as f64, (r as f64 + 0.5) / grid_h as f64);
            let mut i = 0;
            for pos in [u, v] {
                for k in 1..=freqs {
                    let a = std::f64::consts::PI * k as f64 * pos;
                    row[i] = a.sin();
                    row[i + 1] = a.cos();
                    i += 2;
                }
            }
        }
    }
    t
}

/// Per-patch sigmoid gate from a scaled dot product between a projected
/// word vector and projected patch features. Output keeps the map shape.
#[derive(Debug, Clone)]
pub struct AttentionalPool {
    pub emb_proj: Linear,
    pub feat_proj: Linear,
}

impl AttentionalPool {
    pub fn new(store: &mut ParamStore, name: &str, emb_dim: usize, channels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            emb_proj: Linear::new(store, &format!("{name}.emb_proj"), emb_dim, dim, rng),
            feat_proj: Linear::new(store, &format!("{name}.feat_proj"), channels, dim, rng),
        }
    }

    /// Returns the gated map `[P, C]` and the gates `[P, 1]`.
    pub fn forward(&self, g: &mut Graph, feat: Var, emb: Var) -> (Var, Var) {
        let f = self.feat_proj.forward(g, feat);
        self.gate(g, feat, f, emb)
    }

    /// As [`AttentionalPool::forward`] with `feat_proj(feat)` already computed,
    /// so several labels can share it.
    pub fn gate(&self, g: &mut Graph, feat: Var, f: Var, emb: Var) -> (Var, Var) {
        let e = self.emb_proj.forward(g, emb);
        let scores = g.matmul_nt(f, e);
        let scores = g.scale(scores, 1.0 / (self.emb_proj.out_dim as f64).sqrt());
        let gates = g.sigmoid(scores);
        (g.mul_col(feat, gates), gates)
    }
}

/// Mean of the feature rows selected by `mask`.
pub fn mask_extract_var(g: &mut Graph, feat: Var, mask: &BinaryMask) -> Result<Var> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::InvalidArgument("mask has no set cells".into()));
    }
    if g.shape(feat).0 != mask.data.len() {
        return Err(Error::Shape(format!("mask has {} cells, feature map {}", mask.data.len(), g.shape(feat).0)));
    }
    let w = mask.data.iter().map(|&m| m as f64 / n as f64).collect();
    let w = g.constant(Tensor::row_vector(w));
    Ok(g.matmul(w, feat))
}

pub fn mask_extract(featmap: &ImageFeatureMap, mask: &BinaryMask) -> Result<Vec<f64>> {
    if mask.grid_h != featmap.grid_h || mask.grid_w != featmap.grid_w {
        return Err(Error::Shape(format!(
            "mask grid {}x{} vs feature grid {}x{}",
            mask.grid_h, mask.grid_w, featmap.grid_h, featmap.grid_w
        )));
    }
    let mut g = Graph::detached();
    let f = g.constant(featmap.data.clone());
    let v = mask_extract_var(&mut g, f, mask)?;
    Ok(g.value(v).data.clone())
}

/// Cross-attention whose values are the unprojected patch features. Keys
/// see the patch feature and, optionally, a positional code; multi-head
/// weights are averaged before mixing so outputs stay exact convex
/// combinations of patches.
#[derive(Debug, Clone)]
pub struct IdentityCrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub heads: usize,
    pub key_extra_dim: usize,
}

pub struct AttentionVars {
    pub outputs: Var,
    pub heatmaps: Var,
    /// Head-averaged scaled logits `[n, P]`.
    pub logits: Var,
}

impl IdentityCrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        channels: usize,
        key_extra_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "attention dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), query_dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), channels + key_extra_dim, dim, rng),
            heads,
            key_extra_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, patches: Var, key_extra: Option<Var>) -> AttentionVars {
        let key_in = match key_extra {
            Some(pos) => g.concat_cols(&[patches, pos]),
            None => patches,
        };
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, key_in);
        let head_dim = self.query.out_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut logits = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh) = if self.heads == 1 {
                (q, k)
            } else {
                (g.slice_cols(q, h * head_dim, head_dim), g.slice_cols(k, h * head_dim, head_dim))
            };
            let l = g.matmul_nt(qh, kh);
            let l = g.scale(l, scale);
            logits.push(l);
            weights.push(g.softmax_rows(l));
        }
        let (heatmaps, logits) = if self.heads == 1 {
            (weights[0], logits[0])
        } else {
            let mut hsum = weights[0];
            let mut lsum = logits[0];
            for i in 1..self.heads {
                hsum = g.add(hsum, weights[i]);
                lsum = g.add(lsum, logits[i]);
            }
            let inv = 1.0 / self.heads as f64;
            (g.scale(hsum, inv), g.scale(lsum, inv))
        };
        let outputs = g.matmul(heatmaps, patches);
        AttentionVars { outputs, heatmaps, logits }
    }

    /// Value-level call; `queries: [n, query_dim]`, `patch_seq: [P, C]`.
    pub fn attend(&self, store: &ParamStore, queries: &Tensor, patch_seq: &Tensor, key_extra: Option<&Tensor>) -> Result<AttentionResult> {
        if queries.rows == 0 {
            return Err(Error::Shape("at least one query is required".into()));
        }
        if queries.cols != self.query.in_dim {
            return Err(Error::Shape(format!("query dim {} != {}", queries.cols, self.query.in_dim)));
        }
        if patch_seq.cols + key_extra.map_or(0, |t| t.cols) != self.key.in_dim {
            return Err(Error::Shape(format!("patch dim {} does not match key projection", patch_seq.cols)));
        }
        let mut g = Graph::new(store);
        let q = g.constant(queries.clone());
        let p = g.constant(patch_seq.clone());
        let extra = key_extra.map(|t| g.constant(t.clone()));
        let out = self.forward(&mut g, q, p, extra);
        Ok(AttentionResult { outputs: g.value(out.outputs).clone(), heatmaps: g.value(out.heatmaps).clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub emb_dim: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub pool_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub fusion_hidden: usize,
    pub key_extra_dim: usize,
}

/// Per-context inputs that do not depend on parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedContext {
    pub emb_s: Vec<f64>,
    pub emb_o: Vec<f64>,
    pub mask_s: BinaryMask,
    pub mask_o: BinaryMask,
    pub spatial: [f64; SPATIAL_DIM],
}

impl PreparedContext {
    pub fn new(ctx: &ContextInput, table: &EmbeddingTable, grid: (usize, usize)) -> Result<Self> {
        Ok(Self {
            emb_s: table.get(&ctx.subject.label)?.to_vec(),
            emb_o: table.get(&ctx.object.label)?.to_vec(),
            mask_s: bbox_to_mask(&ctx.subject.bbox, ctx.image_size, grid),
            mask_o: bbox_to_mask(&ctx.object.bbox, ctx.image_size, grid),
            spatial: spatial_features(&ctx.subject.bbox, &ctx.object.bbox, ctx.image_size)?,
        })
    }
}

pub struct EncoderVars {
    pub mu: Var,
    pub logvar: Var,
    /// `[2, P]` subject/object heatmaps of the enrichment attention.
    pub heatmaps: Var,
    /// `[2, C]` mask-extracted gated features, the visual reconstruction targets.
    pub entity_features: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub dims: EncoderDims,
    pub pool: AttentionalPool,
    pub attention: IdentityCrossAttention,
    pub fusion: [Linear; 2],
    pub mu_head: Linear,
    pub logvar_head: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, dims: EncoderDims, rng: &mut impl Rng) -> Self {
        let pool = AttentionalPool::new(store, "encoder.pool", dims.emb_dim, dims.channels, dims.pool_dim, rng);
        let attention = IdentityCrossAttention::new(
            store,
            "encoder.attention",
            dims.channels + ENTITY_BOX_DIM,
            dims.channels,
            dims.key_extra_dim,
            dims.attn_dim,
            dims.heads,
            rng,
        );
        let fused = 2 * dims.channels + 2 * dims.emb_dim + SPATIAL_DIM;
        let fusion = [
            Linear::new(store, "encoder.fusion.0", fused, dims.fusion_hidden, rng),
            Linear::new(store, "encoder.fusion.1", dims.fusion_hidden, dims.fusion_hidden, rng),
        ];
        let mu_head = Linear::new(store, "encoder.mu", dims.fusion_hidden, dims.latent_dim, rng);
        let logvar_head = Linear::new(store, "encoder.logvar", dims.fusion_hidden, dims.latent_dim, rng);
        Self { dims, pool, attention, fusion, mu_head, logvar_head }
    }

    pub fn forward(&self, g: &mut Graph, feat: Var, key_extra: Option<Var>, ctx: &PreparedContext) -> Result<EncoderVars> {
        let emb_s = g.constant(Tensor::row_vector(ctx.emb_s.clone()));
        let emb_o = g.constant(Tensor::row_vector(ctx.emb_o.clone()));
        let f = self.pool.feat_proj.forward(g, feat);
        let (pooled_s, _) = self.pool.gate(g, feat, f, emb_s);
        let (pooled_o, _) = self.pool.gate(g, feat, f, emb_o);
        let ent_s = mask_extract_var(g, pooled_s, &ctx.mask_s)?;
        let ent_o = mask_extract_var(g, pooled_o, &ctx.mask_o)?;
        let entities = g.concat_rows(&[ent_s, ent_o]);
        let boxes = Tensor::from_vec(2, ENTITY_BOX_DIM, ctx.spatial[..2 * ENTITY_BOX_DIM].to_vec());
        let boxes = g.constant(boxes);
        let queries = g.concat_cols(&[entities, boxes]);
        let att = self.attention.forward(g, queries, feat, key_extra);
        let enriched_s = g.slice_rows(att.outputs, 0, 1);
        let enriched_o = g.slice_rows(att.outputs, 1, 1);
        let spatial = g.constant(Tensor::row_vector(ctx.spatial.to_vec()));
        let fused = g.concat_cols(&[enriched_s, enriched_o, emb_s, emb_o, spatial]);
        let h = self.fusion[0].forward(g, fused);
        let h = g.silu(h);
        let h = self.fusion[1].forward(g, h);
        let h = g.silu(h);
        let mu = self.mu_head.forward(g, h);
        let lv = self.logvar_head.forward(g, h);
        let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok(EncoderVars { mu, logvar, heatmaps: att.heatmaps, entity_features: entities })
    }
}
