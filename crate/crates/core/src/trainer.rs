//! Pretraining loop and checkpoint files.
//!
//! Each context in a batch is forwarded and differentiated in its own graph.
//! Per-context gradients are summed in batch order, so the update does not
//! depend on how many worker threads computed them.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::dataio::{iter_contexts, ContextInput, EmbeddingTable, SceneRecord};
use crate::encoder::PreparedContext;
use crate::error::{Error, Result};
use crate::features::{ImageFeatureMap, Raster};
use crate::losses::{sample_losses, total_loss, BoxLossMode, LossBreakdown, LossParts, LossWeights};
use crate::model::{BackboneKind, FeatureInput, ModelConfig, RelVae};
use crate::params::{Adam, AdamConfig, Gradients, ParamId};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RVCK";
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of steps over which β ramps linearly from 0.
    pub warmup_fraction: f64,
    /// Backpropagate into the CNN; otherwise its initial weights stay fixed.
    pub train_backbone: bool,
    pub box_loss: BoxLossMode,
    /// Progress line on stderr every this many steps; 0 is silent.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            alpha: 10.0,
            beta: 0.1,
            warmup_fraction: 0.2,
            train_backbone: true,
            box_loss: BoxLossMode::Softmax,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be finite and nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("train.warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// KL weight at 0-based `step`.
    pub fn beta_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if warm == 0 {
            return self.beta;
        }
        self.beta * (step as f64 / warm as f64).min(1.0)
    }
}

/// Snapshot of a ChaCha8 stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: RelVae,
    pub train_config: TrainConfig,
    pub step: usize,
    pub rng_state: RngState,
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    /// One row per step.
    pub losses: Vec<LossBreakdown>,
}

/// Trainer-side generator; the model initialiser uses stream 0 of the same seed.
pub fn trainer_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

struct Sample {
    ctx: ContextInput,
    prep: PreparedContext,
}

enum SceneInput {
    Raster(Raster),
    Map(ImageFeatureMap),
}

/// Pretrains on every annotated pair of `scenes`. Predicates are never read.
pub fn pretrain(
    scenes: &[SceneRecord],
    table: &EmbeddingTable,
    model_config: &ModelConfig,
    config: &TrainConfig,
    base_dir: Option<&Path>,
    jobs: usize,
) -> Result<PretrainOutput> {
    config.validate()?;
    let mut model = RelVae::new(model_config.clone(), config.seed)?;
    let mut rng = trainer_rng(config.seed);
    if config.steps == 0 {
        let rng_state = RngState::capture(&rng);
        return Ok(PretrainOutput {
            checkpoint: Checkpoint { model, train_config: config.clone(), step: 0, rng_state },
            losses: Vec::new(),
        });
    }
    let contexts: Vec<ContextInput> = iter_contexts(scenes, false).map(|(c, _)| c).collect();
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("pretraining set has no contexts".into()));
    }
    let train_cnn = config.train_backbone && model.config.backbone == BackboneKind::Cnn;
    let inputs: Vec<SceneInput> = scenes
        .iter()
        .map(|s| {
            if train_cnn {
                let r = crate::features::scene_raster(s, base_dir)?;
                model.backbone.as_ref().expect("cnn").check_raster(&r)?;
                Ok(SceneInput::Raster(r))
            } else {
                model.extract(s, base_dir).map(SceneInput::Map)
            }
        })
        .collect::<Result<_>>()?;
    let samples: Vec<Sample> = contexts
        .into_iter()
        .map(|ctx| {
            let grid = match &inputs[ctx.scene_index] {
                SceneInput::Raster(r) => {
                    let s = model.config.stride();
                    (r.height / s, r.width / s)
                }
                SceneInput::Map(m) => m.grid(),
            };
            let prep = model.prepare(&ctx, table, grid)?;
            Ok(Sample { ctx, prep })
        })
        .collect::<Result<_>>()?;

    let pool = if jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps);
    let latent = model.config.latent_dim;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let eps: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let weights = LossWeights { alpha: config.alpha, beta: config.beta_at(step) };
        let run = |i: usize| -> Result<(LossParts, Gradients)> {
            let s = &samples[batch[i]];
            let input = match &inputs[s.ctx.scene_index] {
                SceneInput::Raster(r) => FeatureInput::Raster(r),
                SceneInput::Map(m) => FeatureInput::Map(m),
            };
            sample_step(&model, input, &s.prep, &eps[i], weights, config.box_loss, train_cnn)
        };
        let results: Vec<Result<(LossParts, Gradients)>> = match &pool {
            Some(p) => p.install(|| (0..batch.len()).into_par_iter().map(run).collect()),
            None => (0..batch.len()).map(run).collect(),
        };
        let n = batch.len() as f64;
        let mut grads = Gradients::empty(model.params.len());
        let mut sum = LossParts { l_cos: 0.0, l_bbox: 0.0, l_mse: 0.0, l_kl: 0.0 };
        for r in results {
            let (parts, g) = r?;
            sum.l_cos += parts.l_cos;
            sum.l_bbox += parts.l_bbox;
            sum.l_mse += parts.l_mse;
            sum.l_kl += parts.l_kl;
            grads.accumulate(&g, 1.0 / n);
        }
        let mean = LossParts { l_cos: sum.l_cos / n, l_bbox: sum.l_bbox / n, l_mse: sum.l_mse / n, l_kl: sum.l_kl / n };
        let breakdown = total_loss(mean, weights, batch.len());
        if !breakdown.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step, diagnostic: batch_dump(&samples, &batch, &breakdown) });
        }
        adam.step(&mut model.params, &grads);
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            eprintln!(
                "step {:>6}  total {:.5}  cos {:.5}  bbox {:.5}  mse {:.5}  kl {:.5}",
                step + 1,
                breakdown.total,
                breakdown.l_cos,
                breakdown.l_bbox,
                breakdown.l_mse,
                breakdown.l_kl
            );
        }
        losses.push(breakdown);
    }
    let rng_state = RngState::capture(&rng);
    Ok(PretrainOutput {
        checkpoint: Checkpoint { model, train_config: config.clone(), step: config.steps, rng_state },
        losses,
    })
}

/// Loss parts and parameter gradients of one context with noise `eps`.
pub fn sample_step(
    model: &RelVae,
    input: FeatureInput,
    prep: &PreparedContext,
    eps: &[f64],
    weights: LossWeights,
    mode: BoxLossMode,
    train_cnn: bool,
) -> Result<(LossParts, Gradients)> {
    let mut g = Graph::new(&model.params);
    let mut fv = model.feature_vars(&mut g, input)?;
    if !train_cnn {
        fv.feat = g.detach(fv.feat);
    }
    let enc = model.encoder.forward(&mut g, fv.feat, fv.key_extra, prep)?;
    let half = g.scale(enc.logvar, 0.5);
    let sd = g.exp(half);
    let e = g.constant(Tensor::row_vector(eps.to_vec()));
    let noise = g.mul(sd, e);
    let z = g.add(enc.mu, noise);
    let dec = model.decoder.forward(&mut g, z, fv.feat, fv.key_extra);
    let parts = sample_losses(&mut g, prep, &enc, &dec, mode)?;
    let loss = parts.weighted(&mut g, weights);
    let values = parts.values(&g);
    Ok((values, g.backward_params(loss).param_grads()))
}

fn batch_dump(samples: &[Sample], batch: &[usize], b: &LossBreakdown) -> String {
    let items: Vec<serde_json::Value> = batch
        .iter()
        .map(|&i| {
            let c = &samples[i].ctx;
            serde_json::json!({
                "image_id": c.image_id,
                "relation_index": c.relation_index,
                "subject": {"label": c.subject.label, "bbox": c.subject.bbox},
                "object": {"label": c.object.label, "bbox": c.object.bbox},
            })
        })
        .collect();
    serde_json::json!({
        "l_cos": b.l_cos, "l_bbox": b.l_bbox, "l_mse": b.l_mse, "l_kl": b.l_kl, "total": b.total,
        "batch": items,
    })
    .to_string()
}

pub fn write_loss_csv(path: &Path, losses: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step", "l_cos", "l_bbox", "l_mse", "l_kl", "total"]).map_err(|e| csv_err(path, e))?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            l.l_cos.to_string(),
            l.l_bbox.to_string(),
            l.l_mse.to_string(),
            l.l_kl.to_string(),
            l.total.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: String,
    dtype: String,
    step: usize,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng_state: RngState,
    tensors: Vec<TensorEntry>,
    data_sha256: String,
}

/// Layout: magic `RVCK`, little-endian u32 header length, UTF-8 JSON
/// header, then every tensor's values as little-endian f64 in header order.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut data = Vec::with_capacity(ckpt.model.params.num_scalars() * 8);
    let mut tensors = Vec::new();
    for (_, name, t) in ckpt.model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), rows: t.rows, cols: t.cols });
        for v in &t.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.into(),
        dtype: "float64".into(),
        step: ckpt.step,
        model_config: ckpt.model.config.clone(),
        train_config: ckpt.train_config.clone(),
        rng_state: ckpt.rng_state,
        tensors,
        data_sha256: Sha256::digest(&data).iter().map(|b| format!("{b:02x}")).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let value: serde_json::Value = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("");
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version.to_string(), expected: CHECKPOINT_VERSION.into() });
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| corrupt(&format!("header: {e}")))?;
    if header.dtype != "float64" {
        return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
    }
    let data = &body[hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if data.len() != expected {
        return Err(corrupt(&format!("data section is {} bytes, header describes {expected}", data.len())));
    }
    let digest: String = Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect();
    if digest != header.data_sha256 {
        return Err(corrupt("data checksum mismatch"));
    }
    let mut model = RelVae::new(header.model_config, 0)?;
    if model.params.len() != header.tensors.len() {
        return Err(corrupt(&format!("{} tensors, model has {}", header.tensors.len(), model.params.len())));
    }
    let mut off = 0;
    for (i, t) in header.tensors.iter().enumerate() {
        let id = ParamId(i);
        if model.params.name(id) != t.name {
            return Err(corrupt(&format!("tensor {i} is {}, model expects {}", t.name, model.params.name(id))));
        }
        let dst = model.params.get_mut(id);
        if (dst.rows, dst.cols) != (t.rows, t.cols) {
            return Err(corrupt(&format!("tensor {} is {}x{}, model expects {}x{}", t.name, t.rows, t.cols, dst.rows, dst.cols)));
        }
        for v in dst.data.iter_mut() {
            *v = f64::from_le_bytes(data[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    }
    Ok(Checkpoint { model, train_config: header.train_config, step: header.step, rng_state: header.rng_state })
}
