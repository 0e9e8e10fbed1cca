//! Reverse pass over a [`ForwardTrace`].

use ndarray::{s, Array1, Array2, Axis};
use sar_core::Grid2D;

use crate::error::{Error, Result};
use crate::layers::{gelu_grad, layer_norm_backward, linear_backward, softmax_rows_backward};
use crate::model::{ForwardTrace, Model};
use crate::params::{BlockParams, Params};

/// Loss gradients with respect to the forward outputs. Either source may be absent.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub logits: Option<Array1<f64>>,
    /// One grid per head, w.r.t. `ForwardTrace::last_block_similarity`.
    pub similarity: Option<Vec<Grid2D>>,
}

impl Model {
    /// Exact parameter gradients of the losses whose output gradients are given.
    pub fn backward(&self, trace: &ForwardTrace, grads: &OutputGrads) -> Result<Params> {
        self.check_trace(trace)?;
        let cfg = &self.config;
        let p = &self.params;
        let mut g = p.zeros_like();

        if let Some(dl) = &grads.logits {
            if dl.len() != cfg.num_classes {
                return Err(Error::Shape(format!("logit gradient has {} entries, expected {}", dl.len(), cfg.num_classes)));
            }
        }
        if let Some(ds) = &grads.similarity {
            if ds.len() != cfg.heads || ds.iter().any(|grid| grid.side() != cfg.grid_side()) {
                return Err(Error::Shape(format!(
                    "similarity gradient must be {} grids of side {}",
                    cfg.heads,
                    cfg.grid_side()
                )));
            }
        }

        // classifier head and final norm on the CLS token
        let mut dx = Array2::<f64>::zeros((cfg.num_tokens(), cfg.embed_dim));
        if let Some(dl) = &grads.logits {
            let dl = dl.view().insert_axis(Axis(0));
            let dnorm = linear_backward(trace.cls_normed.view(), dl, &p.head_w, &mut g.head_w, &mut g.head_b);
            let dcls = layer_norm_backward(
                dnorm.view(),
                &trace.final_norm,
                p.norm_gamma.view(),
                &mut g.norm_gamma,
                &mut g.norm_beta,
            );
            dx.row_mut(0).assign(&dcls.row(0));
        }

        for l in (0..cfg.blocks).rev() {
            let last = l + 1 == cfg.blocks;
            let sim = if last { grads.similarity.as_deref() } else { None };
            dx = self.block_backward(l, trace, dx, sim, &mut g.blocks[l])?;
        }

        // embeddings
        g.pos_embed += &dx;
        g.cls_token += &dx.row(0);
        let dpatch = dx.slice(s![1.., ..]);
        ndarray::linalg::general_mat_mul(1.0, &trace.patches.t(), &dpatch, 1.0, &mut g.patch_w);
        g.patch_b += &dpatch.sum_axis(Axis(0));
        Ok(g)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.config != self.config {
            return Err(Error::TraceMismatch("trace was produced under a different config".into()));
        }
        if trace.param_count != self.params.count() || trace.blocks.len() != self.params.blocks.len() {
            return Err(Error::TraceMismatch("parameter layout differs from the traced model".into()));
        }
        Ok(())
    }

    fn block_backward(
        &self,
        l: usize,
        trace: &ForwardTrace,
        dout: Array2<f64>,
        similarity: Option<&[Grid2D]>,
        g: &mut BlockParams,
    ) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let bp = &self.params.blocks[l];
        let c = &trace.blocks[l];
        let last = l + 1 == cfg.blocks;
        let (d, dh) = (cfg.embed_dim, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch
        let mut dmid = if !last || cfg.last_block.mlp_skip() { dout.clone() } else { Array2::zeros(dout.raw_dim()) };
        let dact = linear_backward(c.act.view(), dout.view(), &bp.fc2_w, &mut g.fc2_w, &mut g.fc2_b);
        let mut dfc1 = dact;
        ndarray::Zip::from(&mut dfc1).and(&c.fc1_out).for_each(|d, &x| *d *= gelu_grad(x));
        let dmlp_in = linear_backward(c.mlp_in.view(), dfc1.view(), &bp.fc1_w, &mut g.fc1_w, &mut g.fc1_b);
        match (&bp.ln2, &c.ln2, &mut g.ln2) {
            (Some((gamma, _)), Some(cache), Some((dg, db))) => {
                dmid += &layer_norm_backward(dmlp_in.view(), cache, gamma.view(), dg, db);
            }
            (None, None, None) => dmid += &dmlp_in,
            _ => return Err(Error::TraceMismatch(format!("block {l} norm layout differs from trace"))),
        }

        // MSA branch
        let mut dinput = if !last || cfg.last_block.msa_skip() { dmid.clone() } else { Array2::zeros(dmid.raw_dim()) };
        let dheads = linear_backward(c.heads_out.view(), dmid.view(), &bp.proj_w, &mut g.proj_w, &mut g.proj_b);
        let mut dqkv = Array2::<f64>::zeros(c.qkv.raw_dim());
        for h in 0..cfg.heads {
            let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = c.qkv.slice(s![.., qs..qs + dh]);
            let k = c.qkv.slice(s![.., ks..ks + dh]);
            let v = c.qkv.slice(s![.., vs..vs + dh]);
            let a = &c.attn[h];
            let dout_h = dheads.slice(s![.., qs..qs + dh]);

            let dattn = dout_h.dot(&v.t());
            dqkv.slice_mut(s![.., vs..vs + dh]).assign(&a.t().dot(&dout_h));
            let mut dscores = softmax_rows_backward(a.view(), dattn.view());
            if let Some(sim) = similarity {
                let mut row = dscores.slice_mut(s![0, 1..]);
                row += &ndarray::ArrayView1::from(sim[h].values());
            }
            dscores *= scale;
            dqkv.slice_mut(s![.., qs..qs + dh]).assign(&dscores.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh]).assign(&dscores.t().dot(&q));
        }
        let dln1 = linear_backward(c.ln1_out.view(), dqkv.view(), &bp.qkv_w, &mut g.qkv_w, &mut g.qkv_b);
        dinput += &layer_norm_backward(dln1.view(), &c.ln1, bp.ln1_gamma.view(), &mut g.ln1_gamma, &mut g.ln1_beta);
        Ok(dinput)
    }
}
