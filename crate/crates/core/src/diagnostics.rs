//! Latent-space inspection: exports with colouring metadata, 2-D
//! projection, cross-image reconstruction overlays and the box-perturbation probe.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{iter_contexts, BBox, ContextInput, EmbeddingTable, SceneRecord};
use crate::decoder::{nearest_label, DecodedContext};
use crate::encoder::LatentCode;
use crate::error::{Error, Result};
use crate::features::{bbox_to_mask, scene_raster, BinaryMask, Raster};
use crate::fewshot::embed_contexts;
use crate::model::RelVae;

/// Palette for the label-pair colouring.
pub const CONTEXT_PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#e7ba52",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub image_id: String,
    pub relation_index: usize,
    pub feature: Vec<f64>,
    pub predicate: String,
    pub subject_label: String,
    pub object_label: String,
    pub norm_subject_cx: f64,
    pub context_color: String,
}

pub fn context_color(subject_label: &str, object_label: &str) -> &'static str {
    let h = Sha256::digest(format!("{subject_label}\t{object_label}").as_bytes());
    CONTEXT_PALETTE[h[0] as usize % CONTEXT_PALETTE.len()]
}

/// One record per annotated relation, in scene then relation order.
pub fn export_latents(
    model: &RelVae,
    scenes: &[SceneRecord],
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<LatentRecord>> {
    let labelled: Vec<(ContextInput, Option<String>)> = iter_contexts(scenes, true).collect();
    let contexts: Vec<ContextInput> = labelled.iter().map(|(c, _)| c.clone()).collect();
    let feats = embed_contexts(model, scenes, &contexts, table, base_dir, jobs)?;
    Ok(labelled
        .into_iter()
        .zip(feats)
        .map(|((c, p), f)| LatentRecord {
            image_id: c.image_id.clone(),
            relation_index: c.relation_index,
            feature: f.vector,
            predicate: p.expect("labelled"),
            norm_subject_cx: (c.subject.bbox.center().0 / c.image_size.0 as f64).clamp(0.0, 1.0),
            context_color: context_color(&c.subject.label, &c.object.label).to_string(),
            subject_label: c.subject.label,
            object_label: c.object.label,
        })
        .collect())
}

/// Columns: `image_id, relation_index, predicate, subject_label,
/// object_label, norm_subject_cx, context_color, z0 … z{D-1}`.
pub fn write_latents_csv(path: &Path, records: &[LatentRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let dim = records.first().map_or(0, |r| r.feature.len());
    let mut header: Vec<String> = ["image_id", "relation_index", "predicate", "subject_label", "object_label", "norm_subject_cx", "context_color"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(err)?;
    for r in records {
        let mut row = vec![
            r.image_id.clone(),
            r.relation_index.to_string(),
            r.predicate.clone(),
            r.subject_label.clone(),
            r.object_label.clone(),
            r.norm_subject_cx.to_string(),
            r.context_color.clone(),
        ];
        row.extend(r.feature.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Pca,
    /// Pass features through unchanged for an outside t-SNE tool.
    External,
}

/// Principal component analysis onto the top two components. Each component's
/// sign makes its largest-magnitude loading positive.
pub fn pca_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument("projection needs at least 2 points".into()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features must share one nonzero dimension".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    if cov.trace() <= 0.0 {
        return Err(Error::InvalidArgument("features have zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::new();
    for &c in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(c).clone_owned();
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        if v[lead] < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let p0 = row.dot(&comps[0].transpose());
            let p1 = comps.get(1).map_or(0.0, |c| row.dot(&c.transpose()));
            [p0, p1]
        })
        .collect())
}

pub fn project_2d(features: &[Vec<f64>], method: ProjectionMethod) -> Result<Vec<Vec<f64>>> {
    match method {
        ProjectionMethod::Pca => Ok(pca_2d(features)?.into_iter().map(|p| p.to_vec()).collect()),
        ProjectionMethod::External => {
            if features.len() < 2 {
                return Err(Error::InvalidArgument("projection needs at least 2 points".into()));
            }
            Ok(features.to_vec())
        }
    }
}

/// Sum of `heat` over the set cells of `mask`.
pub fn mass_in(heat: &[f64], mask: &BinaryMask) -> f64 {
    heat.iter().zip(&mask.data).filter(|(_, &m)| m == 1).fold(0.0, |acc, (h, _)| acc + h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReconReport {
    pub id: String,
    pub source_image: String,
    pub target_image: String,
    pub decoded: DecodedContext,
    pub nearest_subject: (String, f64),
    pub nearest_object: (String, f64),
    /// Heat mass inside the source boxes, rasterised on the target grid.
    pub subject_mass_in_source_box: f64,
    pub object_mass_in_source_box: f64,
    pub overlays: Vec<PathBuf>,
}

/// Blends a heatmap, upscaled by nearest neighbour, in red over `raster`.
pub fn render_overlay(raster: &Raster, heat: &[f64], grid: (usize, usize)) -> image::RgbImage {
    let (gh, gw) = grid;
    let max = heat.iter().cloned().fold(0.0, f64::max);
    let mut img = raster.to_rgb_image();
    for (x, y, px) in img.enumerate_pixels_mut() {
        let cell = (y as usize * gh / raster.height) * gw + (x as usize * gw / raster.width);
        let a = if max > 0.0 { heat[cell] / max } else { 0.0 };
        let [r, g, b] = px.0.map(|c| c as f64);
        let mix = |c: f64, t: f64| (0.4 * c + 0.6 * (a * t + (1.0 - a) * c * 0.3)).round().clamp(0.0, 255.0) as u8;
        px.0 = [mix(r, 255.0), mix(g, 0.0), mix(b, 0.0)];
    }
    img
}

fn raster_or_blank(scene: &SceneRecord, base_dir: Option<&Path>) -> Raster {
    scene_raster(scene, base_dir).unwrap_or_else(|_| Raster::constant(scene.width as usize, scene.height as usize, 0.5))
}

/// Decodes the posterior mean of `source` on `target`'s image and writes
/// `{id}_subj.png` and `{id}_obj.png` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn cross_reconstruct(
    model: &RelVae,
    source_scene: &SceneRecord,
    source: &ContextInput,
    target_scene: &SceneRecord,
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
    out_dir: &Path,
    id: &str,
) -> Result<CrossReconReport> {
    let src_map = model.extract(source_scene, base_dir)?;
    let (post, _) = model.encode(source, &src_map, table)?;
    let tgt_map = model.extract(target_scene, base_dir)?;
    let decoded = model.decode(&LatentCode { z: post.mu }, &tgt_map)?;
    let nearest_subject = nearest_label(&decoded.sem_s, table)?;
    let nearest_object = nearest_label(&decoded.sem_o, table)?;
    let grid = tgt_map.grid();
    let tsize = (target_scene.width, target_scene.height);
    let scale = |b: &BBox| {
        let (sx, sy) = (tsize.0 as f64 / source.image_size.0 as f64, tsize.1 as f64 / source.image_size.1 as f64);
        BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
    };
    let ms = bbox_to_mask(&scale(&source.subject.bbox), tsize, grid);
    let mo = bbox_to_mask(&scale(&source.object.bbox), tsize, grid);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let raster = raster_or_blank(target_scene, base_dir);
    let mut overlays = Vec::new();
    for (suffix, heat) in [("subj", &decoded.heat_s), ("obj", &decoded.heat_o)] {
        let path = out_dir.join(format!("{id}_{suffix}.png"));
        render_overlay(&raster, heat, grid).save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        overlays.push(path);
    }
    Ok(CrossReconReport {
        id: id.to_string(),
        source_image: source_scene.image_id.clone(),
        target_image: target_scene.image_id.clone(),
        subject_mass_in_source_box: mass_in(&decoded.heat_s, &ms),
        object_mass_in_source_box: mass_in(&decoded.heat_o, &mo),
        nearest_subject,
        nearest_object,
        decoded,
        overlays,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub image_id: String,
    pub relation_index: usize,
    pub original_box: BBox,
    pub override_box: BBox,
    /// Object-heatmap mass inside the override box.
    pub mass_override: f64,
    /// Object-heatmap mass inside the annotated box.
    pub mass_original: f64,
    /// Mass on cells both boxes cover.
    pub mass_both: f64,
    pub nearest_subject: String,
    pub nearest_object: String,
}

/// Encodes the context with the object box replaced, decodes on the same
/// image and measures where the object heatmap lands.
pub fn perturbed_probe(
    model: &RelVae,
    scene: &SceneRecord,
    ctx: &ContextInput,
    bbox_override: BBox,
    table: &EmbeddingTable,
    base_dir: Option<&Path>,
) -> Result<ProbeReport> {
    bbox_override
        .validate(ctx.image_size.0 as f64, ctx.image_size.1 as f64)
        .map_err(|m| Error::InvalidArgument(format!("override box: {m}")))?;
    let map = model.extract(scene, base_dir)?;
    let mut tampered = ctx.clone();
    tampered.object.bbox = bbox_override;
    let (post, _) = model.encode(&tampered, &map, table)?;
    let decoded = model.decode(&LatentCode { z: post.mu }, &map)?;
    let grid = map.grid();
    let m_over = bbox_to_mask(&bbox_override, ctx.image_size, grid);
    let m_orig = bbox_to_mask(&ctx.object.bbox, ctx.image_size, grid);
    let both = BinaryMask {
        grid_h: grid.0,
        grid_w: grid.1,
        data: m_over.data.iter().zip(&m_orig.data).map(|(a, b)| a & b).collect(),
    };
    Ok(ProbeReport {
        image_id: ctx.image_id.clone(),
        relation_index: ctx.relation_index,
        original_box: ctx.object.bbox,
        override_box: bbox_override,
        mass_override: mass_in(&decoded.heat_o, &m_over),
        mass_original: mass_in(&decoded.heat_o, &m_orig),
        mass_both: mass_in(&decoded.heat_o, &both),
        nearest_subject: nearest_label(&decoded.sem_s, table)?.0,
        nearest_object: nearest_label(&decoded.sem_o, table)?.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn pca_on_centred_2d_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)]).collect();
        let (mx, my) = (pts.iter().map(|p| p[0]).sum::<f64>() / 12.0, pts.iter().map(|p| p[1]).sum::<f64>() / 12.0);
        for p in pts.iter_mut() {
            p[0] -= mx;
            p[1] -= my;
        }
        let proj = pca_2d(&pts).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let d0 = dist([pts[i][0], pts[i][1]], [pts[j][0], pts[j][1]]);
                assert!((dist(proj[i], proj[j]) - d0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pca_duplicates_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..10).map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = pca_2d(&x).unwrap();
        let doubled: Vec<Vec<f64>> = x.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let pd = pca_2d(&doubled).unwrap();
        for i in 0..10 {
            assert!(dist(pd[2 * i], pd[2 * i + 1]) < 1e-9);
            assert!(dist(pd[2 * i], p[i]) < 1e-6);
        }
        // oracle: covariance eigenvalues via nalgebra on an explicitly built matrix
        let n = 10.0;
        let mut cov = DMatrix::<f64>::zeros(32, 32);
        let mean: Vec<f64> = (0..32).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        for r in &x {
            for a in 0..32 {
                for b in 0..32 {
                    cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1.0);
                }
            }
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let var: f64 = (0..2).map(|c| p.iter().map(|q| q[c] * q[c]).sum::<f64>() / (n - 1.0)).sum();
        assert!((var - ev[0] - ev[1]).abs() < 1e-9);
        assert!(pca_2d(&x[..1]).is_err());
        assert!(pca_2d(&vec![vec![1.0, 2.0]; 4]).is_err());
    }

    #[test]
    fn mass_partial_sums() {
        let heat = [0.1, 0.2, 0.3, 0.4];
        let m = BinaryMask { grid_h: 2, grid_w: 2, data: vec![1, 0, 0, 1] };
        assert!((mass_in(&heat, &m) - 0.5).abs() < 1e-15);
    }
}
