//! Patch-grid image features and box-to-grid masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Im2ColSpec, Var};
use crate::dataio::{synth, BBox, SceneRecord, SYNTHETIC_SOURCE};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// RGB raster, `pixels` is `[height·width, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Tensor,
}

impl Raster {
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, pixels: Tensor::full(width * height, 3, value) }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
        Ok(Self { width: w, height: h, pixels: Tensor::from_vec(w * h, 3, data) })
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixels.row(y as usize * self.width + x as usize);
            image::Rgb([0, 1, 2].map(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }
}

/// Raster for a scene: rendered when synthetic, otherwise loaded from
/// `image_source` (relative paths resolve against `base_dir`).
pub fn scene_raster(scene: &SceneRecord, base_dir: Option<&Path>) -> Result<Raster> {
    if scene.image_source == SYNTHETIC_SOURCE {
        return synth::render_scene(scene);
    }
    let path = resolve(&scene.image_source, base_dir);
    let r = Raster::load(&path)?;
    if (r.width, r.height) != (scene.width as usize, scene.height as usize) {
        return Err(Error::Shape(format!(
            "{} is {}x{} but scene {} declares {}x{}",
            path.display(),
            r.width,
            r.height,
            scene.image_id,
            scene.width,
            scene.height
        )));
    }
    Ok(r)
}

fn resolve(source: &str, base_dir: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(source);
    match base_dir {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

/// Feature map over a `grid_h × grid_w` patch grid; `data` is `[grid_h·grid_w, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub data: Tensor,
    pub image_size: (u32, u32),
}

impl ImageFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, data: Tensor, image_size: (u32, u32)) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Shape("feature grid must be at least 1x1".into()));
        }
        if data.rows != grid_h * grid_w {
            return Err(Error::Shape(format!("{} feature rows for a {grid_h}x{grid_w} grid", data.rows)));
        }
        if !data.is_finite() {
            return Err(Error::Shape("feature map contains non-finite values".into()));
        }
        Ok(Self { grid_h, grid_w, channels: data.cols, data, image_size })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.grid_w + col] == 1
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Cells set in `self` are all set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }
}

/// A cell is set when the box covers more than half of it; if no cell
/// qualifies, the cell holding the box centre is set.
pub fn bbox_to_mask(bbox: &BBox, image_size: (u32, u32), grid: (usize, usize)) -> BinaryMask {
    let (gh, gw) = grid;
    let cell_w = image_size.0 as f64 / gw as f64;
    let cell_h = image_size.1 as f64 / gh as f64;
    let mut data = vec![0u8; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            let cell = BBox::new(c as f64 * cell_w, r as f64 * cell_h, (c + 1) as f64 * cell_w, (r + 1) as f64 * cell_h);
            if bbox.intersection_area(&cell) / (cell_w * cell_h) > 0.5 {
                data[r * gw + c] = 1;
            }
        }
    }
    if data.iter().all(|&v| v == 0) {
        let (cx, cy) = bbox.center();
        let c = ((cx / cell_w).floor() as usize).min(gw - 1);
        let r = ((cy / cell_h).floor() as usize).min(gh - 1);
        data[r * gw + c] = 1;
    }
    BinaryMask { grid_h: gh, grid_w: gw, data }
}

/// Source of patch-grid features for a scene's image.
pub trait FeatureSource {
    /// Pixels per grid cell along each axis.
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
    fn extract(&self, scene: &SceneRecord) -> Result<ImageFeatureMap>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 3×3 conv stage; the last entry is the feature dim.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stage_channels: vec![16, 32, 64] }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }
}

/// Small trainable CNN: `n` stages of 3×3 stride-2 convolution + SiLU.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    config: BackboneConfig,
    stages: Vec<(ParamId, ParamId)>,
}

impl ConvBackbone {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            let w = store.add_glorot(format!("backbone.conv{i}.weight"), 9 * cin, cout, rng);
            let b = store.add_zeros(format!("backbone.conv{i}.bias"), 1, cout);
            stages.push((w, b));
            cin = cout;
        }
        Self { config, stages }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stages.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn check_raster(&self, raster: &Raster) -> Result<()> {
        let s = self.config.stride();
        if !raster.width.is_multiple_of(s) || !raster.height.is_multiple_of(s) || raster.width == 0 || raster.height == 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by backbone stride {s}",
                raster.width, raster.height
            )));
        }
        Ok(())
    }

    /// Returns the `[grid_h·grid_w, C]` feature node and the grid dims.
    pub fn forward(&self, g: &mut Graph, raster: &Raster) -> Result<(Var, usize, usize)> {
        self.check_raster(raster)?;
        let normalized = raster.pixels.map(|v| 2.0 * v - 1.0);
        let mut x = g.constant(normalized);
        let (mut h, mut w) = (raster.height, raster.width);
        for &(wid, bid) in &self.stages {
            let spec = Im2ColSpec { height: h, width: w, kernel: 3, stride: 2, pad: 1 };
            let cols = g.im2col(x, spec);
            let weight = g.param(wid);
            let bias = g.param(bid);
            let y = g.matmul(cols, weight);
            let y = g.add_row(y, bias);
            x = g.silu(y);
            h = spec.out_height();
            w = spec.out_width();
        }
        Ok((x, h, w))
    }

    pub fn extract_raster(&self, store: &ParamStore, raster: &Raster) -> Result<ImageFeatureMap> {
        let mut g = Graph::new(store);
        let (x, h, w) = self.forward(&mut g, raster)?;
        ImageFeatureMap::new(h, w, g.value(x).clone(), (raster.width as u32, raster.height as u32))
    }
}

/// The CNN bound to its parameters, as a [`FeatureSource`].
pub struct CnnFeatures<'a> {
    pub backbone: &'a ConvBackbone,
    pub params: &'a ParamStore,
    pub base_dir: Option<&'a Path>,
}

impl FeatureSource for CnnFeatures<'_> {
    fn stride(&self) -> usize {
        self.backbone.config.stride()
    }

    fn channels(&self) -> usize {
        self.backbone.config.channels()
    }

    fn extract(&self, scene: &SceneRecord) -> Result<ImageFeatureMap> {
        let raster = scene_raster(scene, self.base_dir)?;
        self.backbone.extract_raster(self.params, &raster)
    }
}

/// Loads `<base_dir>/<image_source>` feature files.
#[derive(Debug, Clone)]
pub struct PrecomputedFeatures {
    pub base_dir: PathBuf,
    pub stride: usize,
    pub channels: usize,
}

impl FeatureSource for PrecomputedFeatures {
    fn stride(&self) -> usize {
        self.stride
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, scene: &SceneRecord) -> Result<ImageFeatureMap> {
        let path = resolve(&scene.image_source, Some(&self.base_dir));
        let map = read_feature_file(&path, (scene.width, scene.height))?;
        if map.channels != self.channels {
            return Err(Error::FeatureFile { path, msg: format!("{} channels, expected {}", map.channels, self.channels) });
        }
        let expected = (scene.height as usize / self.stride, scene.width as usize / self.stride);
        if map.grid() != expected {
            return Err(Error::FeatureFile { path, msg: format!("grid {:?}, expected {:?}", map.grid(), expected) });
        }
        Ok(map)
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"RVFM";
const DTYPE_F32: u32 = 1;

/// Header: magic `RVFM`, then little-endian u32 `grid_h`, `grid_w`, `channels`,
/// `dtype` (1 = float32); then `grid_h·grid_w·channels` little-endian f32
/// values in row-major `[grid_h][grid_w][channels]` order.
pub fn write_feature_file(path: &Path, map: &ImageFeatureMap) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + map.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [map.grid_h as u32, map.grid_w as u32, map.channels as u32, DTYPE_F32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &map.data.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path, image_size: (u32, u32)) -> Result<ImageFeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::FeatureFile { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 20 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing RVFM header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (gh, gw, c, dtype) = (word(0), word(1), word(2), word(3));
    if dtype != DTYPE_F32 as usize {
        return Err(bad("unsupported dtype"));
    }
    let n = gh * gw * c;
    if bytes.len() != 20 + 4 * n {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    ImageFeatureMap::new(gh, gw, Tensor::from_vec(gh * gw, c, data), image_size).map_err(|e| bad(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cnn_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cnn = ConvBackbone::new(BackboneConfig::default(), &mut store, &mut rng);
        let map = cnn.extract_raster(&store, &Raster::constant(64, 64, 0.3)).unwrap();
        assert_eq!((map.grid_h, map.grid_w, map.channels), (8, 8, 64));
        assert_eq!(cnn.config().stride(), 8);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cnn = ConvBackbone::new(BackboneConfig::default(), &mut store, &mut rng);
        assert!(cnn.extract_raster(&store, &Raster::constant(60, 64, 0.0)).is_err());
    }

    #[test]
    fn zero_weights_give_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cnn = ConvBackbone::new(BackboneConfig::default(), &mut store, &mut rng);
        let ids: Vec<ParamId> = cnn.param_ids().collect();
        for (i, id) in ids.iter().enumerate() {
            let t = store.get_mut(*id);
            let fill = if i % 2 == 1 { 0.25 } else { 0.0 };
            t.data.iter_mut().for_each(|v| *v = fill);
        }
        // pixel value 0.5 normalises to exactly zero input
        let map = cnn.extract_raster(&store, &Raster::constant(64, 64, 0.5)).unwrap();
        let first = map.data.row(0).to_vec();
        for p in 0..map.num_patches() {
            assert_eq!(map.data.row(p), first.as_slice());
        }
    }

    #[test]
    fn eval_extraction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cnn = ConvBackbone::new(BackboneConfig::default(), &mut store, &mut rng);
        let mut raster = Raster::constant(32, 32, 0.1);
        raster.pixels.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 / 7.0);
        let a = cnn.extract_raster(&store, &raster).unwrap();
        let b = cnn.extract_raster(&store, &raster).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let data = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f32 * 0.37 - 1.1) as f64).collect());
        let map = ImageFeatureMap::new(2, 2, data, (16, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        write_feature_file(&path, &map).unwrap();
        let back = read_feature_file(&path, (16, 16)).unwrap();
        assert_eq!(back, map);
        assert!(back.data.data.iter().zip(&map.data.data).all(|(a, b)| a.to_bits() == b.to_bits()));

        let src = PrecomputedFeatures { base_dir: dir.path().to_path_buf(), stride: 8, channels: 3 };
        let scene = SceneRecord {
            image_id: "a".into(),
            width: 16,
            height: 16,
            image_source: "a.feat".into(),
            objects: vec![],
            relations: vec![],
        };
        assert_eq!(src.extract(&scene).unwrap(), map);
        let missing = SceneRecord { image_source: "missing.feat".into(), ..scene };
        assert!(src.extract(&missing).is_err());
    }

    #[test]
    fn corrupt_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        fs::write(&path, b"RVFM\x01\x00\x00\x00").unwrap();
        assert!(read_feature_file(&path, (8, 8)).is_err());
    }

    #[test]
    fn full_image_mask() {
        let m = bbox_to_mask(&BBox::new(0.0, 0.0, 64.0, 64.0), (64, 64), (4, 4));
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn left_half_mask() {
        let m = bbox_to_mask(&BBox::new(0.0, 0.0, 32.0, 64.0), (64, 64), (4, 4));
        assert_eq!(m.count(), 8);
        for r in 0..4 {
            assert!(m.get(r, 0) && m.get(r, 1) && !m.get(r, 2) && !m.get(r, 3));
        }
    }

    #[test]
    fn small_box_falls_back_to_centre_cell() {
        // cells are 16px; cell (row 2, col 1) spans x 16..32, y 32..48
        let b = BBox::new(20.0, 36.0, 28.0, 44.0);
        // oracle: per-cell overlap fractions
        let mut over_half = 0;
        for r in 0..4 {
            for c in 0..4 {
                let cell = BBox::new(c as f64 * 16.0, r as f64 * 16.0, (c + 1) as f64 * 16.0, (r + 1) as f64 * 16.0);
                if b.intersection_area(&cell) / 256.0 > 0.5 {
                    over_half += 1;
                }
            }
        }
        assert_eq!(over_half, 0);
        let m = bbox_to_mask(&b, (64, 64), (4, 4));
        assert_eq!(m.count(), 1);
        assert!(m.get(2, 1));
    }
}
