//! The full cVAE: feature source, encoder and decoder over one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataio::{ContextInput, EmbeddingTable, SceneRecord};
use crate::decoder::{DecodedContext, Decoder, DecoderDims};
use crate::encoder::{
    positional_encoding, EncoderDims, Encoder, LatentCode, PosteriorParams, PreparedContext,
};
use crate::error::{Error, Result};
use crate::features::{
    scene_raster, BackboneConfig, ConvBackbone, FeatureSource, ImageFeatureMap, PrecomputedFeatures, Raster,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Cnn,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub emb_dim: usize,
    pub backbone: BackboneKind,
    /// CNN stage widths; ignored for precomputed maps.
    pub stage_channels: Vec<usize>,
    /// Precomputed map geometry; ignored for the CNN.
    pub feature_stride: usize,
    pub feature_channels: usize,
    pub pool_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub fusion_hidden: usize,
    pub decoder_hidden: usize,
    /// Frequencies per axis of the positional code on attention keys; 0 disables it.
    pub pos_freqs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            emb_dim: 50,
            backbone: BackboneKind::Cnn,
            stage_channels: vec![16, 32, 64],
            feature_stride: 8,
            feature_channels: 64,
            pool_dim: 32,
            attn_dim: 32,
            heads: 1,
            fusion_hidden: 128,
            decoder_hidden: 128,
            pos_freqs: 4,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        match self.backbone {
            BackboneKind::Cnn => *self.stage_channels.last().unwrap_or(&0),
            BackboneKind::Precomputed => self.feature_channels,
        }
    }

    pub fn stride(&self) -> usize {
        match self.backbone {
            BackboneKind::Cnn => 1 << self.stage_channels.len(),
            BackboneKind::Precomputed => self.feature_stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("emb_dim", self.emb_dim),
            ("pool_dim", self.pool_dim),
            ("attn_dim", self.attn_dim),
            ("heads", self.heads),
            ("fusion_hidden", self.fusion_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("channels", self.channels()),
            ("stride", self.stride()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.backbone == BackboneKind::Cnn && self.stage_channels.contains(&0) {
            return Err(Error::Config("model.stage_channels entries must be positive".into()));
        }
        if !self.attn_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("attn_dim {} not divisible by heads {}", self.attn_dim, self.heads)));
        }
        Ok(())
    }
}

/// Where a training sample's feature map comes from.
#[derive(Clone, Copy)]
pub enum FeatureInput<'a> {
    /// Run the CNN inside the graph so its weights receive gradients.
    Raster(&'a Raster),
    /// A fixed map (precomputed, or from a frozen backbone).
    Map(&'a ImageFeatureMap),
}

pub struct FeatureVars {
    pub feat: Var,
    pub key_extra: Option<Var>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct RelVae {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Option<ConvBackbone>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl RelVae {
    /// Parameters are created in a fixed order (backbone, encoder, decoder)
    /// from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = match config.backbone {
            BackboneKind::Cnn => Some(ConvBackbone::new(
                BackboneConfig { stage_channels: config.stage_channels.clone() },
                &mut params,
                &mut rng,
            )),
            BackboneKind::Precomputed => None,
        };
        let key_extra_dim = 4 * config.pos_freqs;
        let encoder = Encoder::new(
            &mut params,
            EncoderDims {
                emb_dim: config.emb_dim,
                channels: config.channels(),
                latent_dim: config.latent_dim,
                pool_dim: config.pool_dim,
                attn_dim: config.attn_dim,
                heads: config.heads,
                fusion_hidden: config.fusion_hidden,
                key_extra_dim,
            },
            &mut rng,
        );
        let decoder = Decoder::new(
            &mut params,
            DecoderDims {
                latent_dim: config.latent_dim,
                emb_dim: config.emb_dim,
                channels: config.channels(),
                hidden: config.decoder_hidden,
                attn_dim: config.attn_dim,
                heads: config.heads,
                key_extra_dim,
            },
            &mut rng,
        );
        Ok(Self { config, params, backbone, encoder, decoder })
    }

    /// Feature map of a scene in eval mode.
    pub fn extract(&self, scene: &SceneRecord, base_dir: Option<&Path>) -> Result<ImageFeatureMap> {
        match &self.backbone {
            Some(b) => {
                let raster = scene_raster(scene, base_dir)?;
                b.extract_raster(&self.params, &raster)
            }
            None => {
                let dir = base_dir.ok_or_else(|| {
                    Error::InvalidArgument("precomputed features need a base directory".into())
                })?;
                let src = PrecomputedFeatures {
                    base_dir: dir.to_path_buf(),
                    stride: self.config.feature_stride,
                    channels: self.config.feature_channels,
                };
                src.extract(scene)
            }
        }
    }

    pub fn backbone_map(&self, raster: &Raster) -> Result<ImageFeatureMap> {
        let b = self.backbone.as_ref().ok_or_else(|| Error::InvalidArgument("model has no CNN backbone".into()))?;
        b.extract_raster(&self.params, raster)
    }

    pub fn check_map(&self, map: &ImageFeatureMap) -> Result<()> {
        if map.channels != self.config.channels() {
            return Err(Error::Shape(format!("feature map has {} channels, model expects {}", map.channels, self.config.channels())));
        }
        Ok(())
    }

    pub fn feature_vars(&self, g: &mut Graph, input: FeatureInput) -> Result<FeatureVars> {
        let (feat, grid) = match input {
            FeatureInput::Raster(r) => {
                let b = self.backbone.as_ref().ok_or_else(|| Error::InvalidArgument("model has no CNN backbone".into()))?;
                let (v, h, w) = b.forward(g, r)?;
                (v, (h, w))
            }
            FeatureInput::Map(m) => {
                self.check_map(m)?;
                (g.constant(m.data.clone()), m.grid())
            }
        };
        let key_extra = (self.config.pos_freqs > 0)
            .then(|| g.constant(positional_encoding(grid.0, grid.1, self.config.pos_freqs)));
        Ok(FeatureVars { feat, key_extra, grid })
    }

    pub fn prepare(&self, ctx: &ContextInput, table: &EmbeddingTable, grid: (usize, usize)) -> Result<PreparedContext> {
        if table.dim() != self.config.emb_dim {
            return Err(Error::Shape(format!("embedding dim {} != model emb_dim {}", table.dim(), self.config.emb_dim)));
        }
        PreparedContext::new(ctx, table, grid)
    }

    /// Posterior parameters and the `[2, P]` encoder heatmaps.
    pub fn encode(&self, ctx: &ContextInput, featmap: &ImageFeatureMap, table: &EmbeddingTable) -> Result<(PosteriorParams, Tensor)> {
        let prep = self.prepare(ctx, table, featmap.grid())?;
        self.encode_prepared(&prep, featmap)
    }

    pub fn encode_prepared(&self, prep: &PreparedContext, featmap: &ImageFeatureMap) -> Result<(PosteriorParams, Tensor)> {
        let mut g = Graph::new(&self.params);
        let fv = self.feature_vars(&mut g, FeatureInput::Map(featmap))?;
        let out = self.encoder.forward(&mut g, fv.feat, fv.key_extra, prep)?;
        let post = PosteriorParams { mu: g.value(out.mu).data.clone(), logvar: g.value(out.logvar).data.clone() };
        Ok((post, g.value(out.heatmaps).clone()))
    }

    pub fn decode(&self, z: &LatentCode, featmap: &ImageFeatureMap) -> Result<DecodedContext> {
        self.check_latent(z)?;
        let mut g = Graph::new(&self.params);
        let fv = self.feature_vars(&mut g, FeatureInput::Map(featmap))?;
        let zv = g.constant(Tensor::row_vector(z.z.clone()));
        let out = self.decoder.forward(&mut g, zv, fv.feat, fv.key_extra);
        let vis = g.value(out.visual);
        let heat = g.value(out.heatmaps);
        Ok(DecodedContext {
            sem_s: g.value(out.sem_s).data.clone(),
            sem_o: g.value(out.sem_o).data.clone(),
            vis_s: vis.row(0).to_vec(),
            vis_o: vis.row(1).to_vec(),
            heat_s: heat.row(0).to_vec(),
            heat_o: heat.row(1).to_vec(),
        })
    }

    /// The image-free part of [`RelVae::decode`].
    pub fn decode_semantics(&self, z: &LatentCode) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_latent(z)?;
        let mut g = Graph::new(&self.params);
        let zv = g.constant(Tensor::row_vector(z.z.clone()));
        let (s, o) = self.decoder.semantics(&mut g, zv);
        Ok((g.value(s).data.clone(), g.value(o).data.clone()))
    }

    /// The encoder's gating of `featmap` by one label embedding.
    pub fn attentional_pool(&self, featmap: &ImageFeatureMap, label_emb: &[f64]) -> Result<ImageFeatureMap> {
        self.check_map(featmap)?;
        if label_emb.len() != self.config.emb_dim {
            return Err(Error::Shape(format!("embedding dim {} != {}", label_emb.len(), self.config.emb_dim)));
        }
        let mut g = Graph::new(&self.params);
        let f = g.constant(featmap.data.clone());
        let e = g.constant(Tensor::row_vector(label_emb.to_vec()));
        let (out, _) = self.encoder.pool.forward(&mut g, f, e);
        ImageFeatureMap::new(featmap.grid_h, featmap.grid_w, g.value(out).clone(), featmap.image_size)
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!("latent dim {} != {}", z.z.len(), self.config.latent_dim)));
        }
        if !z.z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("latent code is not finite".into()));
        }
        Ok(())
    }
}
