//! Parameter storage. The same type holds weights and their gradients.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ViTConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    /// `d x 3d`; columns are `[Q | K | V]`, each split into heads of `d / H` columns.
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array1<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    /// Absent when the block feeds its MLP without normalization.
    pub ln2: Option<(Array1<f64>, Array1<f64>)>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `p^2 x d`.
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub cls_token: Array1<f64>,
    /// `(n + 1) x d`, row 0 for the CLS token.
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Array1<f64>,
    pub norm_beta: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

fn trunc_normal<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

impl Params {
    /// All-zero tensors with the layout `cfg` implies.
    pub fn zeros(cfg: &ViTConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let has_ln2 = i + 1 < cfg.blocks || cfg.last_block.mlp_norm();
                BlockParams {
                    ln1_gamma: Array1::zeros(d),
                    ln1_beta: Array1::zeros(d),
                    qkv_w: Array2::zeros((d, 3 * d)),
                    qkv_b: Array1::zeros(3 * d),
                    proj_w: Array2::zeros((d, d)),
                    proj_b: Array1::zeros(d),
                    ln2: has_ln2.then(|| (Array1::zeros(d), Array1::zeros(d))),
                    fc1_w: Array2::zeros((d, hidden)),
                    fc1_b: Array1::zeros(hidden),
                    fc2_w: Array2::zeros((hidden, d)),
                    fc2_b: Array1::zeros(d),
                }
            })
            .collect();
        Self {
            patch_w: Array2::zeros((cfg.patch_pixels(), d)),
            patch_b: Array1::zeros(d),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((cfg.num_tokens(), d)),
            blocks,
            norm_gamma: Array1::zeros(d),
            norm_beta: Array1::zeros(d),
            head_w: Array2::zeros((d, cfg.num_classes)),
            head_b: Array1::zeros(cfg.num_classes),
        }
    }

    /// Truncated-normal (std 0.02, cut at 2 std) weights and embeddings,
    /// zero biases, unit/zero LayerNorm.
    pub fn init<R: Rng>(cfg: &ViTConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let d = cfg.embed_dim;
        p.patch_w = trunc_normal(rng, (cfg.patch_pixels(), d));
        p.cls_token = trunc_normal(rng, (1, d)).remove_axis(ndarray::Axis(0));
        p.pos_embed = trunc_normal(rng, (cfg.num_tokens(), d));
        for b in &mut p.blocks {
            b.ln1_gamma.fill(1.0);
            b.qkv_w = trunc_normal(rng, b.qkv_w.dim());
            b.proj_w = trunc_normal(rng, b.proj_w.dim());
            if let Some((g, _)) = &mut b.ln2 {
                g.fill(1.0);
            }
            b.fc1_w = trunc_normal(rng, b.fc1_w.dim());
            b.fc2_w = trunc_normal(rng, b.fc2_w.dim());
        }
        p.norm_gamma.fill(1.0);
        p.head_w = trunc_normal(rng, p.head_w.dim());
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, v| v.fill(0.0));
        z
    }

    /// Visits every tensor as `(name, shape, values)` in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        fn s2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn s1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        f("patch_embed.weight", self.patch_w.shape(), s2(&self.patch_w));
        f("patch_embed.bias", self.patch_b.shape(), s1(&self.patch_b));
        f("cls_token", self.cls_token.shape(), s1(&self.cls_token));
        f("pos_embed", self.pos_embed.shape(), s2(&self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            f(&n("ln1.weight"), b.ln1_gamma.shape(), s1(&b.ln1_gamma));
            f(&n("ln1.bias"), b.ln1_beta.shape(), s1(&b.ln1_beta));
            f(&n("attn.qkv.weight"), b.qkv_w.shape(), s2(&b.qkv_w));
            f(&n("attn.qkv.bias"), b.qkv_b.shape(), s1(&b.qkv_b));
            f(&n("attn.proj.weight"), b.proj_w.shape(), s2(&b.proj_w));
            f(&n("attn.proj.bias"), b.proj_b.shape(), s1(&b.proj_b));
            if let Some((g, bt)) = &b.ln2 {
                f(&n("ln2.weight"), g.shape(), s1(g));
                f(&n("ln2.bias"), bt.shape(), s1(bt));
            }
            f(&n("mlp.fc1.weight"), b.fc1_w.shape(), s2(&b.fc1_w));
            f(&n("mlp.fc1.bias"), b.fc1_b.shape(), s1(&b.fc1_b));
            f(&n("mlp.fc2.weight"), b.fc2_w.shape(), s2(&b.fc2_w));
            f(&n("mlp.fc2.bias"), b.fc2_b.shape(), s1(&b.fc2_b));
        }
        f("norm.weight", self.norm_gamma.shape(), s1(&self.norm_gamma));
        f("norm.bias", self.norm_beta.shape(), s1(&self.norm_beta));
        f("head.weight", self.head_w.shape(), s2(&self.head_w));
        f("head.bias", self.head_b.shape(), s1(&self.head_b));
    }

    /// Mutable counterpart of [`Params::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        fn s<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        f("patch_embed.weight", s(&mut self.patch_w));
        f("patch_embed.bias", s(&mut self.patch_b));
        f("cls_token", s(&mut self.cls_token));
        f("pos_embed", s(&mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = |x: &str| format!("blocks.{i}.{x}");
            f(&n("ln1.weight"), s(&mut b.ln1_gamma));
            f(&n("ln1.bias"), s(&mut b.ln1_beta));
            f(&n("attn.qkv.weight"), s(&mut b.qkv_w));
            f(&n("attn.qkv.bias"), s(&mut b.qkv_b));
            f(&n("attn.proj.weight"), s(&mut b.proj_w));
            f(&n("attn.proj.bias"), s(&mut b.proj_b));
            if let Some((g, bt)) = &mut b.ln2 {
                f(&n("ln2.weight"), s(g));
                f(&n("ln2.bias"), s(bt));
            }
            f(&n("mlp.fc1.weight"), s(&mut b.fc1_w));
            f(&n("mlp.fc1.bias"), s(&mut b.fc1_b));
            f(&n("mlp.fc2.weight"), s(&mut b.fc2_w));
            f(&n("mlp.fc2.bias"), s(&mut b.fc2_b));
        }
        f("norm.weight", s(&mut self.norm_gamma));
        f("norm.bias", s(&mut self.norm_beta));
        f("head.weight", s(&mut self.head_w));
        f("head.bias", s(&mut self.head_b));
    }

    /// `(name, shape)` of every tensor in visiting order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each(|n, s, _| out.push((n.to_string(), s.to_vec())));
        out
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, v| n += v.len());
        n
    }

    /// All values concatenated in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        self.for_each(|_, _, v| out.extend_from_slice(v));
        out
    }

    /// `self += scale * other`. Both must share a layout.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let flat = other.flatten();
        let mut offset = 0;
        self.for_each_mut(|_, v| {
            for (a, b) in v.iter_mut().zip(&flat[offset..]) {
                *a += scale * b;
            }
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "parameter layouts differ");
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x *= c));
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        self.for_each(|_, _, v| m = v.iter().fold(m, |m, x| m.max(x.abs())));
        m
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Whether decoupled weight decay applies to a tensor: projection and
/// embedding matrices, not biases, norms, tokens or positions.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != "pos_embed"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LastBlockVariant;
    use rand::SeedableRng;

    #[test]
    fn layout_and_count_agree() {
        let cfg = ViTConfig { image_size: 16, patch_size: 4, embed_dim: 8, heads: 2, blocks: 2, mlp_ratio: 2.0, ..Default::default() };
        let p = Params::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let total: usize = p.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(total, p.count());
        assert_eq!(p.flatten().len(), p.count());
        let names: Vec<String> = p.layout().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"blocks.1.ln2.weight".to_string()));
    }

    #[test]
    fn init_is_truncated() {
        let cfg = ViTConfig::default();
        let p = Params::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert!(p.qkv_abs_max() <= 0.04);
        assert_eq!(p.blocks[0].qkv_b.sum(), 0.0);
        assert_eq!(p.norm_gamma.sum(), cfg.embed_dim as f64);
    }

    #[test]
    fn last_block_drops_ln2_for_c_and_d() {
        for v in LastBlockVariant::ALL {
            let cfg = ViTConfig { last_block: v, ..Default::default() };
            let p = Params::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
            assert_eq!(p.blocks.last().unwrap().ln2.is_some(), v.mlp_norm());
            assert!(p.blocks[0].ln2.is_some());
        }
    }

    #[test]
    fn add_scaled_and_zeros() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, embed_dim: 4, heads: 2, blocks: 1, mlp_ratio: 1.0, ..Default::default() };
        let p = Params::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let mut z = p.zeros_like();
        assert_eq!(z.max_abs(), 0.0);
        z.add_scaled(&p, 2.0);
        z.add_scaled(&p, -1.0);
        assert_eq!(z, p);
    }

    impl Params {
        fn qkv_abs_max(&self) -> f64 {
            self.blocks.iter().flat_map(|b| b.qkv_w.iter()).fold(0.0, |m: f64, x| m.max(x.abs()))
        }
    }
}
