mod common;

use std::sync::OnceLock;

use common::overfit_set;
use relvae::dataio::{build_fewshot_split, iter_contexts, EmbeddingTable, SceneRecord};
use relvae::diagnostics::{cross_reconstruct, export_latents, mass_in, perturbed_probe};
use relvae::features::bbox_to_mask;
use relvae::fewshot::{embed_contexts, fit_head, predict_scenes, HeadConfig, HeadKind, TrainedHead};
use relvae::model::{ModelConfig, RelVae};
use relvae::trainer::{pretrain, TrainConfig};

struct Overfit {
    scenes: Vec<SceneRecord>,
    table: EmbeddingTable,
    model: RelVae,
    totals: Vec<f64>,
}

fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let (scenes, table) = overfit_set();
        let cfg = TrainConfig { steps: 500, batch_size: 8, ..TrainConfig::default() };
        let out = pretrain(&scenes, &table, &ModelConfig::default(), &cfg, None, 1).unwrap();
        Overfit { scenes, table, model: out.checkpoint.model, totals: out.losses.iter().map(|l| l.total).collect() }
    })
}

#[test]
fn overfit_loss_decreases_over_50_step_windows() {
    let means: Vec<f64> = overfit().totals.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert_eq!(means.len(), 10);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
}

#[test]
fn cross_reconstruction_on_its_own_image_lands_in_the_boxes() {
    let o = overfit();
    let dir = tempfile::tempdir().unwrap();
    for (ctx, _) in iter_contexts(&o.scenes, false) {
        let scene = &o.scenes[ctx.scene_index];
        let id = format!("self{}", ctx.scene_index);
        let r = cross_reconstruct(&o.model, scene, &ctx, scene, &o.table, None, dir.path(), &id).unwrap();
        // A uniform heatmap would put exactly the mask's cell share inside.
        let share = |b| {
            let m = bbox_to_mask(b, ctx.image_size, (8, 8));
            m.count() as f64 / m.data.len() as f64
        };
        let (ss, so) = (share(&ctx.subject.bbox), share(&ctx.object.bbox));
        assert!(r.subject_mass_in_source_box > 2.0 * ss, "{id}: {} vs {ss}", r.subject_mass_in_source_box);
        assert!(r.object_mass_in_source_box > 2.0 * so, "{id}: {} vs {so}", r.object_mass_in_source_box);
        assert!(dir.path().join(format!("{id}_subj.png")).is_file());
        assert!(dir.path().join(format!("{id}_obj.png")).is_file());
        for heat in [&r.decoded.heat_s, &r.decoded.heat_o] {
            assert!((heat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn semantics_do_not_depend_on_the_target() {
    let o = overfit();
    let dir = tempfile::tempdir().unwrap();
    let (ctx, _) = iter_contexts(&o.scenes, false).next().unwrap();
    let source = &o.scenes[0];
    let first = cross_reconstruct(&o.model, source, &ctx, &o.scenes[1], &o.table, None, dir.path(), "a").unwrap();
    for target in &o.scenes[2..] {
        let r = cross_reconstruct(&o.model, source, &ctx, target, &o.table, None, dir.path(), "b").unwrap();
        assert_eq!(r.decoded.sem_s, first.decoded.sem_s);
        assert_eq!(r.decoded.sem_o, first.decoded.sem_o);
        assert_eq!(r.nearest_subject, first.nearest_subject);
    }
}

#[test]
fn probe_with_the_original_box_reports_equal_masses() {
    let o = overfit();
    for (ctx, _) in iter_contexts(&o.scenes, false) {
        let scene = &o.scenes[ctx.scene_index];
        let r = perturbed_probe(&o.model, scene, &ctx, ctx.object.bbox, &o.table, None).unwrap();
        assert_eq!(r.mass_override, r.mass_original);
        assert_eq!(r.mass_both, r.mass_original);
        assert!(r.mass_override + r.mass_original - r.mass_both <= 1.0 + 1e-12);
        let again = perturbed_probe(&o.model, scene, &ctx, ctx.object.bbox, &o.table, None).unwrap();
        assert_eq!(r, again);
    }
}

#[test]
fn probe_masses_are_partial_sums_of_one_distribution() {
    let o = overfit();
    let (ctx, _) = iter_contexts(&o.scenes, false).next().unwrap();
    let b = ctx.object.bbox;
    let moved = relvae::dataio::BBox::new(64.0 - b.x2, 64.0 - b.y2, 64.0 - b.x1, 64.0 - b.y1);
    let r = perturbed_probe(&o.model, &o.scenes[0], &ctx, moved, &o.table, None).unwrap();
    for m in [r.mass_override, r.mass_original, r.mass_both] {
        assert!((0.0..=1.0).contains(&m));
    }
    assert!(r.mass_override + r.mass_original - r.mass_both <= 1.0 + 1e-12);
    let mask = bbox_to_mask(&moved, ctx.image_size, (8, 8));
    let map = o.model.extract(&o.scenes[0], None).unwrap();
    let mut tampered = ctx.clone();
    tampered.object.bbox = moved;
    let (post, _) = o.model.encode(&tampered, &map, &o.table).unwrap();
    let dec = o.model.decode(&relvae::encoder::LatentCode { z: post.mu }, &map).unwrap();
    assert_eq!(mass_in(&dec.heat_o, &mask), r.mass_override);
}

#[test]
fn latents_cover_every_relation() {
    let o = overfit();
    let recs = export_latents(&o.model, &o.scenes, &o.table, None, 1).unwrap();
    assert_eq!(recs.len(), iter_contexts(&o.scenes, false).count());
    for r in &recs {
        assert_eq!(r.feature.len(), o.model.config.latent_dim);
        assert!(!r.predicate.is_empty() && !r.subject_label.is_empty() && !r.object_label.is_empty());
        assert!(r.context_color.starts_with('#'));
        assert!((0.0..=1.0).contains(&r.norm_subject_cx));
    }
}

#[test]
fn heads_leave_the_encoder_untouched_and_are_deterministic() {
    let o = overfit();
    let split = build_fewshot_split(&o.scenes, 1, 3).unwrap();
    let before = o.model.params.fingerprint();
    let cfg = HeadConfig::default();
    for kind in HeadKind::ALL {
        let a = fit_head(kind, &o.model, &o.scenes, &split, &o.table, None, &cfg, 1).unwrap();
        let b = fit_head(kind, &o.model, &o.scenes, &split, &o.table, None, &cfg, 2).unwrap();
        assert_eq!(a, b);
        let pa = predict_scenes(&a, &o.model, &o.scenes, &o.table, None, 1).unwrap();
        let pb = predict_scenes(&b, &o.model, &o.scenes, &o.table, None, 3).unwrap();
        assert_eq!(pa, pb);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        a.write(&path).unwrap();
        assert_eq!(TrainedHead::read(&path).unwrap(), a);
    }
    assert_eq!(o.model.params.fingerprint(), before);
}

#[test]
fn features_are_posterior_means_in_order() {
    let o = overfit();
    let mut contexts: Vec<_> = iter_contexts(&o.scenes, false).map(|(c, _)| c).collect();
    contexts.reverse();
    let feats = embed_contexts(&o.model, &o.scenes, &contexts, &o.table, None, 1).unwrap();
    assert_eq!(feats.len(), contexts.len());
    for (c, f) in contexts.iter().zip(&feats) {
        assert_eq!((f.image_id.as_str(), f.relation_index), (c.image_id.as_str(), c.relation_index));
        let map = o.model.extract(&o.scenes[c.scene_index], None).unwrap();
        let (post, _) = o.model.encode(c, &map, &o.table).unwrap();
        assert_eq!(f.vector, post.mu);
    }
}

#[test]
fn jobs_do_not_change_pretraining() {
    let (scenes, table) = overfit_set();
    let cfg = TrainConfig { steps: 6, batch_size: 4, ..TrainConfig::default() };
    let a = pretrain(&scenes, &table, &ModelConfig::default(), &cfg, None, 1).unwrap();
    let b = pretrain(&scenes, &table, &ModelConfig::default(), &cfg, None, 3).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint.model.params.fingerprint(), b.checkpoint.model.params.fingerprint());
}
