#![allow(dead_code)]

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sar_core::{connected_components, spatial_entropy_loss, threshold_map, LossConfig};
use sar_vit::{classification_loss, LastBlockVariant, Model, OutputGrads, Params, ViTConfig};

pub fn tiny_config(variant: LastBlockVariant) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
        last_block: variant,
    }
}

pub fn tiny_model(variant: LastBlockVariant, seed: u64) -> (Model, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new(tiny_config(variant), &mut rng).unwrap();
    // larger-than-init weights so every path carries signal worth checking
    m.params.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3)));
    let img = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (m, img)
}

/// `CE + lambda * L_se` at the current parameters, plus the component labels of every head.
pub fn combined_loss(m: &Model, img: &[f64], label: usize, lambda: f64) -> (f64, Vec<Vec<u32>>) {
    let t = m.forward(img).unwrap();
    let (ce, _) = classification_loss(&t.logits, label).unwrap();
    let (se, _) = spatial_entropy_loss(&t.last_block_similarity, &LossConfig::default()).unwrap();
    let labels = t
        .last_block_similarity
        .iter()
        .map(|s| connected_components(&threshold_map(s).0, 0.0).labels().to_vec())
        .collect();
    (ce + lambda * se, labels)
}

pub fn analytic_grads(m: &Model, img: &[f64], label: usize, lambda: f64) -> Params {
    let t = m.forward(img).unwrap();
    let (_, dlogits) = classification_loss(&t.logits, label).unwrap();
    let (_, dsim) = spatial_entropy_loss(&t.last_block_similarity, &LossConfig::default()).unwrap();
    let dsim = dsim.into_iter().map(|g| g.scale(lambda).unwrap()).collect();
    m.backward(&t, &OutputGrads { logits: Some(dlogits), similarity: Some(dsim) }).unwrap()
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences over every parameter element. Perturbations that
/// change any head's component labeling are skipped (the loss is only
/// piecewise smooth there).
pub fn finite_difference_check(m: &Model, img: &[f64], label: usize, lambda: f64, h: f64) -> GradCheck {
    let analytic = analytic_grads(m, img, label, lambda).flatten();
    let (_, base_labels) = combined_loss(m, img, label, lambda);
    let layout = m.params.layout();
    let mut names = Vec::new();
    for (n, s) in &layout {
        for i in 0..s.iter().product::<usize>() {
            names.push(format!("{n}[{i}]"));
        }
    }
    let mut probe = m.clone();
    let total = analytic.len();
    let mut out = GradCheck { checked: 0, skipped: 0, max_rel: 0.0, worst: String::new() };
    for idx in 0..total {
        let eval = |probe: &mut Model, delta: f64| {
            let mut offset = 0;
            probe.params.for_each_mut(|_, v| {
                if idx >= offset && idx < offset + v.len() {
                    v[idx - offset] += delta;
                }
                offset += v.len();
            });
            combined_loss(probe, img, label, lambda)
        };
        let (lp, labels_p) = eval(&mut probe, h);
        let (lm, labels_m) = eval(&mut probe, -2.0 * h);
        eval(&mut probe, h);
        if labels_p != base_labels || labels_m != base_labels {
            out.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst = format!("{}: analytic {a:e}, numeric {numeric:e}", names[idx]);
        }
        out.checked += 1;
    }
    out
}

pub fn logits_of(m: &Model, img: &[f64]) -> Array1<f64> {
    m.forward(img).unwrap().logits
}
