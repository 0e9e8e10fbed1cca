//! Forward pass with cached activations.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use sar_core::{Grid2D, HeadProjection, MapKind, TaggedMap};

use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::layers::{gelu, layer_norm, linear, softmax_rows, NormCache};
use crate::params::Params;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ViTConfig,
    pub params: Params,
}

/// Activations of one block kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Array2<f64>,
    pub ln1: NormCache,
    pub ln1_out: Array2<f64>,
    pub qkv: Array2<f64>,
    /// Post-softmax attention, one `(n+1) x (n+1)` matrix per head.
    pub attn: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub heads_out: Array2<f64>,
    /// `z'`: MSA output, plus the block input when the MSA residual is kept.
    pub mid: Array2<f64>,
    pub ln2: Option<NormCache>,
    /// MLP input: `LN2(z')` or `z'` itself.
    pub mlp_in: Array2<f64>,
    pub fc1_out: Array2<f64>,
    pub act: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) config: ViTConfig,
    pub(crate) param_count: usize,
    /// `n x p^2` flattened patches.
    pub(crate) patches: Array2<f64>,
    /// Token embeddings entering block 0.
    pub(crate) embedded: Array2<f64>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) final_norm: NormCache,
    pub(crate) cls_normed: Array2<f64>,
    pub logits: Array1<f64>,
    /// Last-block pre-softmax CLS-query/patch-key scores, one `k x k` grid per head.
    pub last_block_similarity: Vec<Grid2D>,
}

impl ForwardTrace {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Token embeddings `z^l` for `l = 0..=L` (`0` is the embedded input).
    pub fn token_embeddings(&self, layer: usize) -> ArrayView2<'_, f64> {
        if layer == 0 {
            self.embedded.view()
        } else {
            self.blocks[layer - 1].output.view()
        }
    }

    /// Post-softmax attention of head `head` in block `layer` (0-based).
    pub fn attention(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.blocks[layer].attn[head].view()
    }

    pub fn block(&self, layer: usize) -> &BlockCache {
        &self.blocks[layer]
    }

    /// Post-softmax CLS attention over patch tokens in block `layer`, per head.
    pub fn cls_attention(&self, layer: usize) -> Vec<Grid2D> {
        let k = self.config.grid_side();
        self.blocks[layer]
            .attn
            .iter()
            .map(|a| Grid2D::new(k, a.slice(s![0, 1..]).to_vec()).expect("softmax output is finite"))
            .collect()
    }

    pub fn last_block_cls_attention(&self) -> Vec<Grid2D> {
        self.cls_attention(self.blocks.len() - 1)
    }

    /// Last-block CLS maps labeled with their extraction point.
    pub fn last_block_maps(&self, kind: MapKind) -> Vec<TaggedMap> {
        let grids = match kind {
            MapKind::PreSoftmax => self.last_block_similarity.clone(),
            MapKind::PostSoftmax => self.last_block_cls_attention(),
        };
        grids.into_iter().map(|grid| TaggedMap { kind, grid }).collect()
    }

    /// CLS query and patch keys of every head in block `layer`.
    pub fn head_projections(&self, layer: usize) -> Result<Vec<HeadProjection>> {
        let cfg = &self.config;
        let (d, dh) = (cfg.embed_dim, cfg.head_dim());
        let qkv = &self.blocks[layer].qkv;
        (0..cfg.heads)
            .map(|h| {
                let q = qkv.slice(s![0, h * dh..(h + 1) * dh]).to_vec();
                let keys = (1..cfg.num_tokens())
                    .map(|t| qkv.slice(s![t, d + h * dh..d + (h + 1) * dh]).to_vec())
                    .collect();
                Ok(HeadProjection::new(cfg.grid_side(), q, keys)?)
            })
            .collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new<R: Rng>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking that their layout fits `config`.
    pub fn from_params(config: ViTConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config).layout();
        if params.layout() != expected {
            return Err(Error::Shape("parameter layout does not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Splits a row-major `image_size x image_size` image into flattened patches.
    pub fn patchify(&self, image: &[f64]) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let side = cfg.image_size;
        if image.len() != side * side {
            return Err(Error::Shape(format!("image has {} pixels, expected {side}x{side}", image.len())));
        }
        let (k, p) = (cfg.grid_side(), cfg.patch_size);
        let mut patches = Array2::zeros((cfg.num_patches(), p * p));
        for pr in 0..k {
            for pc in 0..k {
                let mut row = patches.row_mut(pr * k + pc);
                for dy in 0..p {
                    for dx in 0..p {
                        row[dy * p + dx] = image[(pr * p + dy) * side + pc * p + dx];
                    }
                }
            }
        }
        Ok(patches)
    }

    pub fn forward(&self, image: &[f64]) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let p = &self.params;
        let patches = self.patchify(image)?;

        let mut x = Array2::zeros((cfg.num_tokens(), cfg.embed_dim));
        x.row_mut(0).assign(&p.cls_token);
        x.slice_mut(s![1.., ..]).assign(&linear(patches.view(), &p.patch_w, &p.patch_b));
        x += &p.pos_embed;
        let embedded = x.clone();

        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut last_block_similarity = Vec::new();
        for l in 0..cfg.blocks {
            let last = l + 1 == cfg.blocks;
            let (cache, sim) = self.block_forward(l, x, last)?;
            if last {
                last_block_similarity = sim;
            }
            x = cache.output.clone();
            blocks.push(cache);
        }

        let (cls_normed, final_norm) = layer_norm(x.slice(s![0..1, ..]), p.norm_gamma.view(), p.norm_beta.view());
        let logits = linear(cls_normed.view(), &p.head_w, &p.head_b).remove_axis(Axis(0));

        Ok(ForwardTrace {
            config: cfg.clone(),
            param_count: p.count(),
            patches,
            embedded,
            blocks,
            final_norm,
            cls_normed,
            logits,
            last_block_similarity,
        })
    }

    fn block_forward(&self, l: usize, input: Array2<f64>, last: bool) -> Result<(BlockCache, Vec<Grid2D>)> {
        let cfg = &self.config;
        let bp = &self.params.blocks[l];
        let (d, dh, k) = (cfg.embed_dim, cfg.head_dim(), cfg.grid_side());
        let scale = 1.0 / (dh as f64).sqrt();

        let (ln1_out, ln1) = layer_norm(input.view(), bp.ln1_gamma.view(), bp.ln1_beta.view());
        let qkv = linear(ln1_out.view(), &bp.qkv_w, &bp.qkv_b);
        let mut heads_out = Array2::zeros((cfg.num_tokens(), d));
        let mut attn = Vec::with_capacity(cfg.heads);
        let mut similarity = Vec::new();
        for h in 0..cfg.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let kk = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&kk.t());
            scores *= scale;
            if last {
                similarity.push(Grid2D::new(k, scores.slice(s![0, 1..]).to_vec())?);
            }
            softmax_rows(&mut scores);
            heads_out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
            attn.push(scores);
        }
        let msa = linear(heads_out.view(), &bp.proj_w, &bp.proj_b);
        let keep_msa_skip = !last || cfg.last_block.msa_skip();
        let mid = if keep_msa_skip { &msa + &input } else { msa };

        let (mlp_in, ln2) = match &bp.ln2 {
            Some((g, b)) => {
                let (y, c) = layer_norm(mid.view(), g.view(), b.view());
                (y, Some(c))
            }
            None => (mid.clone(), None),
        };
        let fc1_out = linear(mlp_in.view(), &bp.fc1_w, &bp.fc1_b);
        let act = fc1_out.mapv(gelu);
        let mlp = linear(act.view(), &bp.fc2_w, &bp.fc2_b);
        let keep_mlp_skip = !last || cfg.last_block.mlp_skip();
        let output = if keep_mlp_skip { &mlp + &mid } else { mlp };

        Ok((
            BlockCache { input, ln1, ln1_out, qkv, attn, heads_out, mid, ln2, mlp_in, fc1_out, act, output },
            similarity,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LastBlockVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: LastBlockVariant) -> ViTConfig {
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

    fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
        (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(tiny(LastBlockVariant::Standard), &mut rng).unwrap();
        let t = m.forward(&random_image(&mut rng, 16)).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for row in t.attention(l, h).rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert_eq!(t.last_block_similarity.len(), 2);
        assert_eq!(t.last_block_similarity[0].side(), 4);
    }

    #[test]
    fn similarity_matches_core_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::new(tiny(LastBlockVariant::NoMsaSkipNoLn), &mut rng).unwrap();
        let t = m.forward(&random_image(&mut rng, 16)).unwrap();
        for (proj, s) in t.head_projections(1).unwrap().iter().zip(&t.last_block_similarity) {
            let reference = sar_core::similarity_map(proj).unwrap();
            for (a, b) in reference.values().iter().zip(s.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_input_gives_uniform_patch_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::new(tiny(LastBlockVariant::Standard), &mut rng).unwrap();
        m.params.pos_embed.fill(0.0);
        let t = m.forward(&vec![0.0; 256]).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let a = t.attention(l, h);
                for row in a.rows() {
                    let patch = row.slice(s![1..]);
                    let first = patch[0];
                    assert!(patch.iter().all(|&v| (v - first).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn wrong_image_size_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::new(tiny(LastBlockVariant::Standard), &mut rng).unwrap();
        assert!(matches!(m.forward(&[0.0; 10]), Err(Error::Shape(_))));
    }

    #[test]
    fn from_params_checks_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Model::new(tiny(LastBlockVariant::Standard), &mut rng).unwrap();
        assert!(Model::from_params(tiny(LastBlockVariant::NoMsaSkip), a.params.clone()).is_ok());
        assert!(Model::from_params(tiny(LastBlockVariant::NoMsaSkipNoLn), a.params).is_err());
    }

    #[test]
    fn post_softmax_maps_are_tagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::new(tiny(LastBlockVariant::Standard), &mut rng).unwrap();
        let t = m.forward(&random_image(&mut rng, 16)).unwrap();
        let post = t.last_block_maps(MapKind::PostSoftmax);
        let cfg = sar_core::LossConfig::default();
        assert!(sar_core::spatial_entropy_loss_tagged(&post, &cfg).is_err());
        assert!(sar_core::spatial_entropy_loss_tagged(&t.last_block_maps(MapKind::PreSoftmax), &cfg).is_ok());
        // CLS attention over patches is part of a softmax row, so it sums below 1
        assert!(post.iter().all(|m| m.grid.sum() < 1.0 && m.grid.values().iter().all(|&v| v > 0.0)));
    }
}
