//! Reconstruction, box-heatmap, visual-feature and KL terms, as graph ops
//! for training and as plain functions over values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::DecoderVars;
use crate::encoder::{EncoderVars, PosteriorParams, PreparedContext};
use crate::error::{Error, Result};
use crate::features::BinaryMask;
use crate::tensor::{l2_norm, Tensor};

/// Lower bound on the prediction norm inside cosine similarity.
pub const COS_EPS: f64 = 1e-8;
/// Heatmap clamp for the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxLossMode {
    /// BCE against the softmax heatmap itself.
    #[default]
    Softmax,
    /// BCE against `sigmoid` of the attention logits.
    SigmoidLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cos: f64,
    pub l_bbox: f64,
    pub l_mse: f64,
    pub l_kl: f64,
    pub total: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_cos: f64,
    pub l_bbox: f64,
    pub l_mse: f64,
    pub l_kl: f64,
}

pub fn total_loss(parts: LossParts, w: LossWeights, n: usize) -> LossBreakdown {
    LossBreakdown {
        l_cos: parts.l_cos,
        l_bbox: parts.l_bbox,
        l_mse: parts.l_mse,
        l_kl: parts.l_kl,
        total: w.alpha * parts.l_cos + parts.l_mse + parts.l_bbox + w.beta * parts.l_kl,
        n,
    }
}

// ---- graph terms, one context at a time ----

/// `1 − cos(target, pred)` for a `[1, d]` prediction and a constant target.
pub fn cosine_term(g: &mut Graph, target: &[f64], pred: Var) -> Result<Var> {
    let tn = l2_norm(target);
    if tn == 0.0 || !tn.is_finite() {
        return Err(Error::InvalidArgument("cosine target has zero norm".into()));
    }
    let unit = g.constant(Tensor::row_vector(target.iter().map(|v| v / tn).collect()));
    let sq = g.mul(pred, pred);
    let sq = g.sum_all(sq);
    let norm = g.sqrt(sq);
    let norm = g.clamp(norm, COS_EPS, f64::INFINITY);
    let d = g.mul(pred, unit);
    let d = g.sum_all(d);
    let cos = g.div(d, norm);
    let neg = g.scale(cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean BCE over all cells of `h` (`[r, P]`) against `masks` (`[r, P]` in {0,1}).
pub fn bce_term(g: &mut Graph, h: Var, masks: &Tensor) -> Var {
    let h = g.clamp(h, BCE_EPS, 1.0 - BCE_EPS);
    let log_h = g.ln(h);
    let om = g.scale(h, -1.0);
    let om = g.add_scalar(om, 1.0);
    let log_1mh = g.ln(om);
    let m = g.constant(masks.clone());
    let inv_m = g.constant(masks.map(|v| 1.0 - v));
    let a = g.mul(m, log_h);
    let b = g.mul(inv_m, log_1mh);
    let s = g.add(a, b);
    let mean = g.mean_all(s);
    g.scale(mean, -1.0)
}

/// Mean over rows of the squared L2 distance; `target` carries no gradient.
pub fn mse_term(g: &mut Graph, target: Var, pred: Var) -> Var {
    let t = g.detach(target);
    let d = g.sub(pred, t);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    let rows = g.shape(pred).0 as f64;
    g.scale(s, 1.0 / rows)
}

/// `½ Σ (exp(lv) + mu² − 1 − lv)` for `[1, D_z]` inputs.
pub fn kl_term(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let e = g.exp(logvar);
    let m2 = g.mul(mu, mu);
    let s = g.add(e, m2);
    let s = g.sub(s, logvar);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_all(s);
    g.scale(s, 0.5)
}

pub struct SampleLossVars {
    pub l_cos: Var,
    pub l_bbox: Var,
    pub l_mse: Var,
    pub l_kl: Var,
}

impl SampleLossVars {
    pub fn weighted(&self, g: &mut Graph, w: LossWeights) -> Var {
        let a = g.scale(self.l_cos, w.alpha);
        let b = g.scale(self.l_kl, w.beta);
        let s = g.add(a, self.l_mse);
        let s = g.add(s, self.l_bbox);
        g.add(s, b)
    }

    pub fn values(&self, g: &Graph) -> LossParts {
        LossParts {
            l_cos: g.value(self.l_cos).item(),
            l_bbox: g.value(self.l_bbox).item(),
            l_mse: g.value(self.l_mse).item(),
            l_kl: g.value(self.l_kl).item(),
        }
    }
}

pub fn mask_rows(a: &BinaryMask, b: &BinaryMask) -> Tensor {
    let mut data = a.as_f64();
    data.extend(b.as_f64());
    Tensor::from_vec(2, a.data.len(), data)
}

/// Per-context loss terms; averaging them over a batch gives the batch losses.
pub fn sample_losses(
    g: &mut Graph,
    prep: &PreparedContext,
    enc: &EncoderVars,
    dec: &DecoderVars,
    mode: BoxLossMode,
) -> Result<SampleLossVars> {
    let cs = cosine_term(g, &prep.emb_s, dec.sem_s)?;
    let co = cosine_term(g, &prep.emb_o, dec.sem_o)?;
    let c = g.add(cs, co);
    let l_cos = g.scale(c, 0.5);
    let h = match mode {
        BoxLossMode::Softmax => dec.heatmaps,
        BoxLossMode::SigmoidLogits => g.sigmoid(dec.logits),
    };
    let l_bbox = bce_term(g, h, &mask_rows(&prep.mask_s, &prep.mask_o));
    let l_mse = mse_term(g, enc.entity_features, dec.visual);
    let l_kl = kl_term(g, enc.mu, enc.logvar);
    Ok(SampleLossVars { l_cos, l_bbox, l_mse, l_kl })
}

// ---- value-level batch functions ----

fn check_pairs(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} targets vs {b} predictions")));
    }
    if a == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Mean cosine distance over entity vectors (batch × entities flattened).
pub fn cosine_loss(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<f64> {
    check_pairs(targets.len(), preds.len(), "cosine_loss")?;
    let mut g = Graph::detached();
    let mut sum = 0.0;
    for (t, p) in targets.iter().zip(preds) {
        if t.len() != p.len() {
            return Err(Error::Shape(format!("cosine_loss: dims {} vs {}", t.len(), p.len())));
        }
        let pv = g.constant(Tensor::row_vector(p.clone()));
        let v = cosine_term(&mut g, t, pv)?;
        sum += g.value(v).item();
    }
    Ok(sum / targets.len() as f64)
}

/// Mean clamped BCE over cells, entities and batch.
pub fn bbox_heatmap_loss(heatmaps: &[Vec<f64>], masks: &[BinaryMask]) -> Result<f64> {
    check_pairs(masks.len(), heatmaps.len(), "bbox_heatmap_loss")?;
    let mut g = Graph::detached();
    let mut sum = 0.0;
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.len() != m.data.len() {
            return Err(Error::Shape(format!("bbox_heatmap_loss: {} cells vs mask {}", h.len(), m.data.len())));
        }
        let hv = g.constant(Tensor::row_vector(h.clone()));
        let v = bce_term(&mut g, hv, &Tensor::row_vector(m.as_f64()));
        sum += g.value(v).item();
    }
    Ok(sum / masks.len() as f64)
}

pub fn mse_loss(targets: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<f64> {
    check_pairs(targets.len(), preds.len(), "mse_loss")?;
    let mut g = Graph::detached();
    let mut sum = 0.0;
    for (t, p) in targets.iter().zip(preds) {
        if t.len() != p.len() {
            return Err(Error::Shape(format!("mse_loss: dims {} vs {}", t.len(), p.len())));
        }
        let tv = g.constant(Tensor::row_vector(t.clone()));
        let pv = g.constant(Tensor::row_vector(p.clone()));
        let v = mse_term(&mut g, tv, pv);
        sum += g.value(v).item();
    }
    Ok(sum / targets.len() as f64)
}

pub fn kl_loss(params: &[PosteriorParams]) -> Result<f64> {
    if params.is_empty() {
        return Err(Error::Shape("kl_loss: empty batch".into()));
    }
    let mut g = Graph::detached();
    let mut sum = 0.0;
    for p in params {
        if p.mu.len() != p.logvar.len() {
            return Err(Error::Shape(format!("kl_loss: mu {} vs logvar {}", p.mu.len(), p.logvar.len())));
        }
        let mu = g.constant(Tensor::row_vector(p.mu.clone()));
        let lv = g.constant(Tensor::row_vector(p.logvar.clone()));
        let v = kl_term(&mut g, mu, lv);
        sum += g.value(v).item();
    }
    Ok(sum / params.len() as f64)
}
