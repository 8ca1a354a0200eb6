#![allow(dead_code)]

use relvae::autodiff::Graph;
use relvae::dataio::{context_of, generate_synthetic_dataset, ContextInput, EmbeddingTable, SceneRecord, SynthConfig};
use relvae::encoder::PreparedContext;
use relvae::features::{scene_raster, Raster};
use relvae::losses::{sample_losses, BoxLossMode, LossWeights};
use relvae::model::{FeatureInput, ModelConfig, RelVae};
use relvae::params::Gradients;
use relvae::tensor::Tensor;

/// CPU seconds consumed by the calling thread while running `f`.
pub fn cpu_seconds<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = cpu_time::ThreadTime::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// 32×32 images, three stride-2 stages → 4×4 grid, D_z = 4.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        emb_dim: 6,
        stage_channels: vec![3, 4, 4],
        pool_dim: 4,
        attn_dim: 4,
        heads: 1,
        fusion_hidden: 6,
        decoder_hidden: 6,
        pos_freqs: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_synth_config(n_scenes: usize) -> SynthConfig {
    SynthConfig { n_scenes, image_size: 32, min_side: 4, max_side: 10, embedding_dim: 6, ..SynthConfig::default() }
}

/// Eight single-relation scenes: the fixed overfit set.
pub fn overfit_set() -> (Vec<SceneRecord>, EmbeddingTable) {
    let cfg = SynthConfig { n_scenes: 8, ..SynthConfig::default() };
    let (mut scenes, table) = generate_synthetic_dataset(&cfg, 11).unwrap();
    for s in &mut scenes {
        s.relations.truncate(1);
    }
    (scenes, table)
}

/// One context with everything needed to evaluate its loss.
pub struct GradFixture {
    pub model: RelVae,
    pub scene: SceneRecord,
    pub ctx: ContextInput,
    pub raster: Raster,
    pub prep: PreparedContext,
    pub eps: Vec<f64>,
    pub weights: LossWeights,
    /// Visual-feature target frozen at the unperturbed parameters, since the
    /// loss stops its gradient.
    pub mse_target: Tensor,
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let (scenes, table) = generate_synthetic_dataset(&tiny_synth_config(1), seed).unwrap();
        let scene = scenes[0].clone();
        let ctx = context_of(0, &scene, 0);
        let model = RelVae::new(tiny_model_config(), seed).unwrap();
        let raster = scene_raster(&scene, None).unwrap();
        let prep = model.prepare(&ctx, &table, (4, 4)).unwrap();
        let eps = vec![0.3, -1.1, 0.7, 0.05];
        let weights = LossWeights { alpha: 10.0, beta: 0.1 };
        let mut f = Self { model, scene, ctx, raster, prep, eps, weights, mse_target: Tensor::zeros(0, 0) };
        f.mse_target = f.entity_features();
        f
    }

    fn entity_features(&self) -> Tensor {
        let mut g = Graph::new(&self.model.params);
        let fv = self.model.feature_vars(&mut g, FeatureInput::Raster(&self.raster)).unwrap();
        let enc = self.model.encoder.forward(&mut g, fv.feat, fv.key_extra, &self.prep).unwrap();
        g.value(enc.entity_features).clone()
    }

    /// Total loss and, when `grads`, its parameter gradients.
    pub fn loss(&self, grads: bool) -> (f64, Option<Gradients>) {
        let m = &self.model;
        let mut g = Graph::new(&m.params);
        let fv = m.feature_vars(&mut g, FeatureInput::Raster(&self.raster)).unwrap();
        let mut enc = m.encoder.forward(&mut g, fv.feat, fv.key_extra, &self.prep).unwrap();
        enc.entity_features = g.constant(self.mse_target.clone());
        let half = g.scale(enc.logvar, 0.5);
        let sd = g.exp(half);
        let e = g.constant(Tensor::row_vector(self.eps.clone()));
        let noise = g.mul(sd, e);
        let z = g.add(enc.mu, noise);
        let dec = m.decoder.forward(&mut g, z, fv.feat, fv.key_extra);
        let parts = sample_losses(&mut g, &self.prep, &enc, &dec, BoxLossMode::Softmax).unwrap();
        let loss = parts.weighted(&mut g, self.weights);
        let value = g.value(loss).item();
        (value, grads.then(|| g.backward(loss).param_grads()))
    }
}
