//! Procedural scenes of coloured shapes with geometrically exact relations.
//!
//! Labels are `<colour>-<shape>`; images are rendered on demand from the
//! scene record itself, so a synthetic dataset is fully described by its
//! JSON-lines file.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{BBox, EmbeddingTable, ObjectInstance, RelationTriplet, SceneRecord, SYNTHETIC_SOURCE};
use crate::error::{Error, Result};
use crate::features::Raster;
use crate::tensor::Tensor;

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.95]),
    ("yellow", [0.95, 0.90, 0.20]),
];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const PREDICATES: [&str; 8] =
    ["left-of", "right-of", "above", "below", "inside", "larger-than", "same-color-as", "touching"];
const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub image_size: u32,
    /// `<colour>-<shape>` labels; colour and shape must come from the built-in palette.
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    /// Relative sampling weight per predicate; empty means uniform.
    pub predicate_weights: Vec<f64>,
    pub max_relations: usize,
    pub max_distractors: usize,
    pub min_side: u32,
    pub max_side: u32,
    pub embedding_dim: usize,
    /// Probability that a relation uses its predicate's typical
    /// `<subject, object>` categories instead of uniformly drawn ones.
    pub context_affinity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let categories = COLORS
            .iter()
            .flat_map(|(c, _)| SHAPES.iter().map(move |s| format!("{c}-{s}")))
            .collect();
        Self {
            n_scenes: 200,
            image_size: 64,
            categories,
            predicates: PREDICATES.iter().map(|p| p.to_string()).collect(),
            predicate_weights: Vec::new(),
            max_relations: 3,
            max_distractors: 1,
            min_side: 6,
            max_side: 20,
            embedding_dim: 50,
            context_affinity: 0.6,
        }
    }
}

fn color_of(label: &str) -> Option<(&'static str, [f64; 3])> {
    let (c, _) = label.split_once('-')?;
    COLORS.iter().find(|(name, _)| *name == c).copied()
}

fn shape_of(label: &str) -> Option<&'static str> {
    let (_, s) = label.split_once('-')?;
    SHAPES.iter().find(|name| **name == s).copied()
}

fn gap_x(s: &BBox, o: &BBox) -> f64 {
    o.x1 - s.x2
}

fn gap_y(s: &BBox, o: &BBox) -> f64 {
    o.y1 - s.y2
}

fn overlap_len(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    a2.min(b2) - a1.max(b1)
}

/// Ground-truth predicate test from labels and boxes; `None` for a predicate
/// outside the built-in vocabulary.
pub fn predicate_holds(predicate: &str, s: &ObjectInstance, o: &ObjectInstance) -> Option<bool> {
    let (a, b) = (&s.bbox, &o.bbox);
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let holds = match predicate {
        "left-of" => acx < bcx && gap_x(a, b) > 0.0,
        "right-of" => acx > bcx && gap_x(b, a) > 0.0,
        "above" => acy < bcy && gap_y(a, b) > 0.0,
        "below" => acy > bcy && gap_y(b, a) > 0.0,
        "inside" => b.contains(a) && a.area() < b.area(),
        "larger-than" => a.area() >= 2.0 * b.area(),
        "same-color-as" => {
            let (ca, cb) = (color_of(&s.label)?, color_of(&o.label)?);
            ca.0 == cb.0
        }
        "touching" => {
            let x_adjacent = a.x2 == b.x1 || b.x2 == a.x1;
            let y_adjacent = a.y2 == b.y1 || b.y2 == a.y1;
            let x_ov = overlap_len(a.x1, a.x2, b.x1, b.x2);
            let y_ov = overlap_len(a.y1, a.y2, b.y1, b.y2);
            a.intersection_area(b) == 0.0 && ((x_adjacent && y_ov > 0.0) || (y_adjacent && x_ov > 0.0))
        }
        _ => return None,
    };
    Some(holds)
}

/// Typical `(subject, object)` categories of every predicate: subjects are
/// taken in category order, objects are the next category whose colour
/// matches (for `same-color-as`) or differs.
pub fn typical_contexts(cfg: &SynthConfig) -> BTreeMap<String, (String, String)> {
    let n = cfg.categories.len();
    let mut out = BTreeMap::new();
    for (i, p) in cfg.predicates.iter().enumerate() {
        let s = &cfg.categories[i % n];
        let same = p == "same-color-as";
        let o = (1..n)
            .map(|j| &cfg.categories[(i + j) % n])
            .find(|o| (color_of(o).map(|c| c.0) == color_of(s).map(|c| c.0)) == same)
            .unwrap_or(s);
        out.insert(p.clone(), (s.clone(), o.clone()));
    }
    out
}

/// Boxes separated by at least one pixel on some axis.
fn separated(a: &BBox, b: &BBox) -> bool {
    gap_x(a, b) >= 1.0 || gap_x(b, a) >= 1.0 || gap_y(a, b) >= 1.0 || gap_y(b, a) >= 1.0
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    typical: BTreeMap<String, (String, String)>,
}

impl Sampler<'_> {
    fn side(&mut self, lo: u32, hi: u32) -> u32 {
        self.rng.random_range(lo..=hi.max(lo))
    }

    fn place(&mut self, w: u32, h: u32) -> BBox {
        let s = self.cfg.image_size;
        let x = self.rng.random_range(0..=s - w);
        let y = self.rng.random_range(0..=s - h);
        BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
    }

    fn random_box(&mut self) -> BBox {
        let (lo, hi) = (self.cfg.min_side, self.cfg.max_side);
        let (w, h) = (self.side(lo, hi), self.side(lo, hi));
        self.place(w, h)
    }

    fn category(&mut self) -> String {
        let i = self.rng.random_range(0..self.cfg.categories.len());
        self.cfg.categories[i].clone()
    }

    fn same_color_category(&mut self, label: &str) -> String {
        let color = color_of(label).map(|c| c.0);
        let pool: Vec<&String> = self.cfg.categories.iter().filter(|c| color_of(c).map(|x| x.0) == color).collect();
        pool[self.rng.random_range(0..pool.len())].clone()
    }

    /// Box of random size next to `a` on one axis with a gap of `gap` pixels
    /// (negative `dir` places it before `a`), overlapping `a` on the other axis.
    fn beside(&mut self, a: &BBox, horizontal: bool, dir: i32, gap: f64) -> BBox {
        let (lo, hi) = (self.cfg.min_side, self.cfg.max_side);
        let (w, h) = (self.side(lo, hi) as f64, self.side(lo, hi) as f64);
        if horizontal {
            let y = self.rng.random_range((a.y1 - h + 1.0) as i64..=(a.y2 - 1.0) as i64) as f64;
            let x = if dir > 0 { a.x2 + gap } else { a.x1 - gap - w };
            BBox::new(x, y, x + w, y + h)
        } else {
            let x = self.rng.random_range((a.x1 - w + 1.0) as i64..=(a.x2 - 1.0) as i64) as f64;
            let y = if dir > 0 { a.y2 + gap } else { a.y1 - gap - h };
            BBox::new(x, y, x + w, y + h)
        }
    }

    /// Box of size `w × h` overlapping `a` on both axes.
    fn overlapping(&mut self, a: &BBox, w: u32, h: u32) -> BBox {
        let (w, h) = (w as f64, h as f64);
        let x = self.rng.random_range((a.x1 - w + 1.0) as i64..=(a.x2 - 1.0) as i64) as f64;
        let y = self.rng.random_range((a.y1 - h + 1.0) as i64..=(a.y2 - 1.0) as i64) as f64;
        BBox::new(x, y, x + w, y + h)
    }

    /// One candidate `(subject_box, object_box)` aimed at `predicate`; the
    /// caller verifies it.
    fn candidate_boxes(&mut self, predicate: &str) -> (BBox, BBox) {
        let (lo, hi, size) = (self.cfg.min_side, self.cfg.max_side, self.cfg.image_size);
        let max_gap = (size / 4).max(1) as i64;
        match predicate {
            "left-of" | "right-of" | "above" | "below" => {
                let a = self.random_box();
                let gap = self.rng.random_range(1..=max_gap) as f64;
                let horizontal = matches!(predicate, "left-of" | "right-of");
                let dir = if matches!(predicate, "left-of" | "above") { 1 } else { -1 };
                let b = self.beside(&a, horizontal, dir, gap);
                (a, b)
            }
            "inside" => {
                let outer_lo = (lo * 2 + 4).min(size);
                let (ow, oh) = (self.side(outer_lo, hi.max(outer_lo) + 6), self.side(outer_lo, hi.max(outer_lo) + 6));
                let (ow, oh) = (ow.min(size), oh.min(size));
                let outer = self.place(ow, oh);
                let (iw, ih) = (self.side(lo, ow - 4), self.side(lo, oh - 4));
                let ix = self.rng.random_range(outer.x1 as u32 + 1..=outer.x2 as u32 - 1 - iw);
                let iy = self.rng.random_range(outer.y1 as u32 + 1..=outer.y2 as u32 - 1 - ih);
                let inner = BBox::new(ix as f64, iy as f64, (ix + iw) as f64, (iy + ih) as f64);
                (inner, outer)
            }
            "larger-than" => {
                let big_lo = (lo * 2).min(hi);
                let (sw, sh) = (self.side(big_lo, hi), self.side(big_lo, hi));
                let (ow, oh) = (self.side(lo, big_lo), self.side(lo, big_lo));
                let a = self.place(sw, sh);
                let b = self.overlapping(&a, ow, oh);
                (a, b)
            }
            "same-color-as" => {
                let a = self.random_box();
                let (w, h) = (self.side(lo, hi), self.side(lo, hi));
                let b = self.overlapping(&a, w, h);
                (a, b)
            }
            "touching" => {
                let a = self.random_box();
                let horizontal = self.rng.random_bool(0.5);
                let dir = if self.rng.random_bool(0.5) { 1 } else { -1 };
                let b = self.beside(&a, horizontal, dir, 0.0);
                (a, b)
            }
            _ => (self.random_box(), self.random_box()),
        }
    }

    /// No other predicate of the vocabulary holds for the pair.
    fn is_unambiguous(&self, predicate: &str, s: &ObjectInstance, o: &ObjectInstance) -> bool {
        self.cfg.predicates.iter().filter(|q| *q != predicate).all(|q| predicate_holds(q, s, o) != Some(true))
    }

    /// Tries to add one `predicate` relation with two fresh objects.
    fn try_relation(&mut self, predicate: &str, objects: &mut Vec<ObjectInstance>, next_id: &mut i64) -> Option<RelationTriplet> {
        let limit = self.cfg.image_size as f64;
        let typical = if self.rng.random_bool(self.cfg.context_affinity) { self.typical.get(predicate).cloned() } else { None };
        for _ in 0..400 {
            let (sb, ob) = self.candidate_boxes(predicate);
            if sb.validate(limit, limit).is_err() || ob.validate(limit, limit).is_err() {
                continue;
            }
            if predicate == "inside" && !(sb.x1 > ob.x1 && sb.y1 > ob.y1 && sb.x2 < ob.x2 && sb.y2 < ob.y2) {
                continue;
            }
            if !objects.iter().all(|e| separated(&e.bbox, &sb) && separated(&e.bbox, &ob)) {
                continue;
            }
            let (s_label, o_label) = match &typical {
                Some(pair) => pair.clone(),
                None => {
                    let s = self.category();
                    let o = if predicate == "same-color-as" { self.same_color_category(&s) } else { self.category() };
                    (s, o)
                }
            };
            let s = ObjectInstance { id: *next_id, label: s_label, bbox: sb };
            let o = ObjectInstance { id: *next_id + 1, label: o_label, bbox: ob };
            if predicate_holds(predicate, &s, &o) != Some(true) || !self.is_unambiguous(predicate, &s, &o) {
                continue;
            }
            let rel = RelationTriplet { subject_id: s.id, object_id: o.id, predicate: predicate.to_string() };
            *next_id += 2;
            objects.push(s);
            objects.push(o);
            return Some(rel);
        }
        None
    }

    fn try_distractor(&mut self, objects: &mut Vec<ObjectInstance>, next_id: &mut i64) {
        for _ in 0..50 {
            let b = self.random_box();
            if objects.iter().all(|e| separated(&e.bbox, &b)) {
                let label = self.category();
                objects.push(ObjectInstance { id: *next_id, label, bbox: b });
                *next_id += 1;
                return;
            }
        }
    }
}

fn check_config(cfg: &SynthConfig) -> Result<()> {
    if cfg.categories.is_empty() || cfg.predicates.is_empty() {
        return Err(Error::Synthesis("categories and predicates must be non-empty".into()));
    }
    for c in &cfg.categories {
        if color_of(c).is_none() || shape_of(c).is_none() {
            return Err(Error::Synthesis(format!("category {c:?} is not <colour>-<shape> from the palette")));
        }
    }
    for p in &cfg.predicates {
        if !PREDICATES.contains(&p.as_str()) {
            return Err(Error::Synthesis(format!("unknown predicate {p:?}")));
        }
    }
    if !cfg.predicate_weights.is_empty() && cfg.predicate_weights.len() != cfg.predicates.len() {
        return Err(Error::Synthesis("predicate_weights must match predicates".into()));
    }
    if cfg.min_side < 2 || cfg.max_side < cfg.min_side {
        return Err(Error::Synthesis(format!("invalid side range {}..={}", cfg.min_side, cfg.max_side)));
    }
    // inside needs an outer box of 2·min_side+4 and two relations need room side by side
    if cfg.image_size < 4 * cfg.min_side + 8 || cfg.max_side > cfg.image_size {
        return Err(Error::Synthesis(format!(
            "image_size {} too small to place objects with sides {}..={}",
            cfg.image_size, cfg.min_side, cfg.max_side
        )));
    }
    if !(0.0..=1.0).contains(&cfg.context_affinity) {
        return Err(Error::Synthesis("context_affinity must lie in [0, 1]".into()));
    }
    if cfg.max_relations == 0 {
        return Err(Error::Synthesis("max_relations must be at least 1".into()));
    }
    Ok(())
}

/// Deterministic under `(config, seed)`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Vec<SceneRecord>, EmbeddingTable)> {
    check_config(cfg)?;
    let table = EmbeddingTable::synthetic(cfg.categories.iter().map(String::as_str), cfg.embedding_dim);
    let weights = if cfg.predicate_weights.is_empty() { vec![1.0; cfg.predicates.len()] } else { cfg.predicate_weights.clone() };
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Synthesis(format!("predicate_weights: {e}")))?;
    let mut sampler = Sampler { cfg, rng: ChaCha8Rng::seed_from_u64(seed), typical: typical_contexts(cfg) };
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for index in 0..cfg.n_scenes {
        let n_rel = sampler.rng.random_range(1..=cfg.max_relations);
        let mut objects = Vec::new();
        let mut relations = Vec::new();
        let mut next_id = 0i64;
        let mut attempts = 0;
        while relations.len() < n_rel && attempts < 20 {
            attempts += 1;
            let predicate = cfg.predicates[pick.sample(&mut sampler.rng)].clone();
            if let Some(r) = sampler.try_relation(&predicate, &mut objects, &mut next_id) {
                relations.push(r);
            }
        }
        if relations.is_empty() {
            return Err(Error::Synthesis(format!("could not place any relation in scene {index}")));
        }
        let n_distract = sampler.rng.random_range(0..=cfg.max_distractors);
        for _ in 0..n_distract {
            sampler.try_distractor(&mut objects, &mut next_id);
        }
        let scene = SceneRecord {
            image_id: format!("synth-{seed}-{index:05}"),
            width: cfg.image_size,
            height: cfg.image_size,
            image_source: SYNTHETIC_SOURCE.to_string(),
            objects,
            relations,
        };
        scene.validate()?;
        scenes.push(scene);
    }
    Ok((scenes, table))
}

/// Rasterises a synthetic scene. Larger objects are painted first so that
/// contained objects stay visible.
pub fn render_scene(scene: &SceneRecord) -> Result<Raster> {
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut pixels = Tensor::zeros(w * h, 3);
    for p in 0..w * h {
        pixels.row_mut(p).copy_from_slice(&BACKGROUND);
    }
    let mut order: Vec<&ObjectInstance> = scene.objects.iter().collect();
    order.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()).then(a.id.cmp(&b.id)));
    for o in order {
        let (_, rgb) = color_of(&o.label)
            .ok_or_else(|| Error::invalid_scene(&scene.image_id, "label", format!("{:?} has no palette colour", o.label)))?;
        let shape = shape_of(&o.label)
            .ok_or_else(|| Error::invalid_scene(&scene.image_id, "label", format!("{:?} has no palette shape", o.label)))?;
        let b = o.bbox;
        let (cx, _) = b.center();
        let (bw, bh) = (b.width(), b.height());
        let x_range = b.x1.floor().max(0.0) as usize..(b.x2.ceil() as usize).min(w);
        let y_range = b.y1.floor().max(0.0) as usize..(b.y2.ceil() as usize).min(h);
        for y in y_range {
            for x in x_range.clone() {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match shape {
                    "square" => true,
                    "circle" => {
                        let dx = (px - (b.x1 + b.x2) * 0.5) / (bw * 0.5);
                        let dy = (py - (b.y1 + b.y2) * 0.5) / (bh * 0.5);
                        dx * dx + dy * dy <= 1.0
                    }
                    _ => (px - cx).abs() <= (py - b.y1) / bh * bw * 0.5 + 0.5,
                };
                if inside {
                    pixels.row_mut(y * w + x).copy_from_slice(&rgb);
                }
            }
        }
    }
    Ok(Raster { width: w, height: h, pixels })
}
