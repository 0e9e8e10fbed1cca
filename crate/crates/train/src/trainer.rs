//! Mini-batch training and evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sar_core::{best_head_jaccard, spatial_entropy, spatial_entropy_loss_tagged, tv_loss, LossConfig, MapKind};
use sar_vit::{classification_loss, Checkpoint, Model, NamedTensor, OutputGrads, Params};
use serde_json::json;

use crate::config::{AuxLoss, TrainConfig};
use crate::data::{generate_dataset, ShapeSample};
use crate::error::{Error, Result};
use crate::optim::{AdamW, CosineSchedule};
use crate::runlog::{EpochRecord, EvalMetrics, RunLog};

/// Independent seeds drawn in a fixed order from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub shuffle: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { init: rng.next_u64(), train_data: rng.next_u64(), test_data: rng.next_u64(), shuffle: rng.next_u64() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<ShapeSample>,
    pub test: Vec<ShapeSample>,
}

impl TrainData {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let seeds = RunSeeds::derive(cfg.seed);
        Ok(Self { train: generate_dataset(&cfg.data, seeds.train_data)?, test: generate_dataset(&cfg.test_spec(), seeds.test_data)? })
    }
}

/// Freshly initialized model for a run.
pub fn init_model(cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    Ok(Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(RunSeeds::derive(cfg.seed).init))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub label: usize,
    pub predicted: usize,
    pub loss: f64,
    pub entropy: f64,
    pub components: f64,
    pub best_head: usize,
    pub jaccard: f64,
}

/// Per-image metrics; `fraction` is the attention mass kept for Jaccard.
pub fn evaluate_samples(model: &Model, data: &[ShapeSample], loss: &LossConfig, fraction: f64) -> Result<Vec<SampleEval>> {
    data.par_iter()
        .map(|s| {
            let trace = model.forward(&s.image)?;
            let (ce, _) = classification_loss(&trace.logits, s.label)?;
            let (entropy, components) = head_stats(&trace.last_block_similarity, loss);
            let (best_head, jaccard) = best_head_jaccard(&trace.last_block_cls_attention(), &s.mask, fraction)?;
            Ok(SampleEval { label: s.label, predicted: trace.predicted_class(), loss: ce, entropy, components, best_head, jaccard })
        })
        .collect()
}

/// Dataset-level metrics. Pure: repeated calls give identical results.
pub fn evaluate(model: &Model, data: &[ShapeSample], loss: &LossConfig, fraction: f64) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = evaluate_samples(model, data, loss, fraction)?;
    let n = per.len() as f64;
    let mean = |f: fn(&SampleEval) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(EvalMetrics {
        samples: per.len(),
        accuracy: mean(|e| (e.label == e.predicted) as u8 as f64),
        loss: mean(|e| e.loss),
        mean_entropy: mean(|e| e.entropy),
        mean_components: mean(|e| e.components),
        mean_jaccard: mean(|e| e.jaccard),
    })
}

/// Mean entropy and component count over heads.
fn head_stats(maps: &[sar_core::Grid2D], loss: &LossConfig) -> (f64, f64) {
    let (mut h, mut c) = (0.0, 0.0);
    for m in maps {
        let r = spatial_entropy(m, loss);
        h += r.entropy;
        c += r.component_count() as f64;
    }
    (h / maps.len() as f64, c / maps.len() as f64)
}

struct SampleStep {
    ce: f64,
    aux: f64,
    correct: bool,
    entropy: f64,
    components: f64,
    grads: Params,
}

fn sample_step(model: &Model, s: &ShapeSample, cfg: &TrainConfig, loss: &LossConfig) -> Result<SampleStep> {
    let trace = model.forward(&s.image)?;
    let (ce, dlogits) = classification_loss(&trace.logits, s.label)?;
    let (entropy, components) = head_stats(&trace.last_block_similarity, loss);
    let (aux, dsim) = match cfg.aux_loss {
        AuxLoss::None => (0.0, None),
        AuxLoss::SpatialEntropy => {
            let (l, g) = spatial_entropy_loss_tagged(&trace.last_block_maps(MapKind::PreSoftmax), loss)?;
            (l, Some(g))
        }
        AuxLoss::TotalVariation => {
            let (l, g) = tv_loss(&trace.last_block_similarity)?;
            (l, Some(g))
        }
    };
    let similarity = dsim.map(|gs| gs.iter().map(|g| g.scale(cfg.lambda)).collect::<sar_core::Result<Vec<_>>>()).transpose()?;
    let grads = model.backward(&trace, &OutputGrads { logits: Some(dlogits), similarity })?;
    Ok(SampleStep { ce, aux, correct: trace.predicted_class() == s.label, entropy, components, grads })
}

/// Passed to the step observer after every optimizer update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub params: &'a Params,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Run log, checkpoints and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&StepInfo)>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Model, optimizer state and progress of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub model: Model,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub step: usize,
    pub log: RunLog,
}

impl Session {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Self::with_model(init_model(cfg)?, cfg)
    }

    pub fn with_model(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config != cfg.model {
            return Err(Error::Incompatible("model was built with a different config".into()));
        }
        let optimizer = AdamW::new(&model.params, cfg.weight_decay);
        Ok(Self { model, optimizer, epochs_done: 0, step: 0, log: RunLog::default() })
    }

    pub fn schedule(cfg: &TrainConfig, train_len: usize) -> CosineSchedule {
        let per_epoch = train_len.div_ceil(cfg.batch_size);
        CosineSchedule { lr: cfg.lr, min_ratio: cfg.min_lr_ratio, total_steps: per_epoch * cfg.epochs }
    }

    /// Trains until `cfg.epochs` epochs are done.
    pub fn run(&mut self, cfg: &TrainConfig, data: &TrainData, opts: &mut RunOptions) -> Result<()> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let loss = cfg.loss_config();
        let schedule = Self::schedule(cfg, data.train.len());
        let seeds = RunSeeds::derive(cfg.seed);
        let mut order: Vec<usize> = (0..data.train.len()).collect();

        while self.epochs_done < cfg.epochs {
            let epoch = self.epochs_done + 1;
            order.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);

            let (mut sum_loss, mut sum_ce, mut sum_aux, mut correct, mut sum_h, mut sum_c) = (0.0, 0.0, 0.0, 0usize, 0.0, 0.0);
            let mut lr = schedule.at(self.step);
            for batch in order.chunks(cfg.batch_size) {
                lr = schedule.at(self.step);
                let outs = batch
                    .par_iter()
                    .map(|&i| sample_step(&self.model, &data.train[i], cfg, &loss))
                    .collect::<Result<Vec<_>>>()?;
                let mut grads = self.model.params.zeros_like();
                let mut batch_loss = 0.0;
                for o in &outs {
                    grads.add_scaled(&o.grads, 1.0);
                    batch_loss += o.ce + cfg.lambda * o.aux;
                }
                let inv = 1.0 / batch.len() as f64;
                grads.scale(inv);
                batch_loss *= inv;
                if !batch_loss.is_finite() || !grads.all_finite() {
                    let dump = opts.out_dir.as_deref().map(|d| dump_batch(d, epoch, self.step, batch, &outs, data)).transpose()?;
                    return Err(Error::NonFinite { epoch, step: self.step, dump });
                }
                self.optimizer.step(&mut self.model.params, &grads, lr);
                self.step += 1;
                for o in &outs {
                    sum_ce += o.ce;
                    sum_aux += o.aux;
                    correct += o.correct as usize;
                    sum_h += o.entropy;
                    sum_c += o.components;
                }
                sum_loss += batch_loss * batch.len() as f64;
                if let Some(f) = opts.on_step.as_mut() {
                    f(&StepInfo { epoch, step: self.step, lr, loss: batch_loss, params: &self.model.params });
                }
            }

            let n = data.train.len() as f64;
            let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
            let test = if due && !data.test.is_empty() {
                Some(evaluate(&self.model, &data.test, &loss, cfg.jaccard_fraction)?)
            } else {
                None
            };
            let record = EpochRecord {
                epoch,
                step: self.step,
                lr,
                train_loss: sum_loss / n,
                train_ce: sum_ce / n,
                train_aux: sum_aux / n,
                train_accuracy: correct as f64 / n,
                mean_entropy: sum_h / n,
                mean_components: sum_c / n,
                test,
            };
            self.epochs_done = epoch;
            if let Some(dir) = &opts.out_dir {
                RunLog::append(dir.join("runlog.jsonl"), &record)?;
            }
            if let Some(f) = opts.on_epoch.as_mut() {
                f(&record);
            }
            self.log.records.push(record);
            if let Some(dir) = &opts.out_dir {
                if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                    let ckdir = dir.join("checkpoints");
                    std::fs::create_dir_all(&ckdir)?;
                    self.to_checkpoint(cfg).save(ckdir.join(format!("epoch-{epoch:03}.ckpt")))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            self.to_checkpoint(cfg).save(dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// Model checkpoint extended with optimizer moments and progress.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.header.insert("train".into(), serde_json::to_value(cfg).expect("config serializes"));
        ck.header.insert(
            "progress".into(),
            json!({ "epochs_done": self.epochs_done, "step": self.step, "adam_t": self.optimizer.t }),
        );
        for (prefix, p) in [("optim.m.", &self.optimizer.m), ("optim.v.", &self.optimizer.v)] {
            p.for_each(|name, shape, data| {
                ck.tensors.push(NamedTensor { name: format!("{prefix}{name}"), shape: shape.to_vec(), data: data.to_vec() })
            });
        }
        ck
    }

    /// Restores a session written by [`Session::to_checkpoint`], with its config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let bad = |m: &str| Error::Vit(sar_vit::Error::Checkpoint(format!("not resumable: {m}")));
        let cfg: TrainConfig = serde_json::from_value(ck.header.get("train").ok_or_else(|| bad("no train config"))?.clone())?;
        let progress = ck.header.get("progress").ok_or_else(|| bad("no progress record"))?;
        let field = |k: &str| progress.get(k).and_then(|v| v.as_u64()).ok_or_else(|| bad(k));
        let model = ck.to_model()?;
        let mut s = Self::with_model(model, &cfg)?;
        s.epochs_done = field("epochs_done")? as usize;
        s.step = field("step")? as usize;
        s.optimizer.t = field("adam_t")?;
        for (prefix, p) in [("optim.m.", &mut s.optimizer.m), ("optim.v.", &mut s.optimizer.v)] {
            let mut missing = None;
            p.for_each_mut(|name, values| match ck.tensor(&format!("{prefix}{name}")) {
                Some(t) if t.data.len() == values.len() => values.copy_from_slice(&t.data),
                _ => {
                    missing.get_or_insert_with(|| format!("{prefix}{name}"));
                }
            });
            if let Some(name) = missing {
                return Err(bad(&format!("tensor {name} missing")));
            }
        }
        Ok((s, cfg))
    }
}

fn dump_batch(dir: &Path, epoch: usize, step: usize, batch: &[usize], outs: &[SampleStep], data: &TrainData) -> Result<PathBuf> {
    let samples: Vec<_> = batch
        .iter()
        .zip(outs)
        .map(|(&i, o)| {
            json!({
                "index": i,
                "label": data.train[i].label,
                "ce": o.ce.to_string(),
                "aux": o.aux.to_string(),
                "grads_finite": o.grads.all_finite(),
            })
        })
        .collect();
    let path = dir.join(format!("nan-dump-step{step}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&json!({ "epoch": epoch, "step": step, "samples": samples }))?)?;
    Ok(path)
}

/// Trains `model` with fresh optimizer state; returns it with the run log.
pub fn train(model: Model, cfg: &TrainConfig, data: &TrainData) -> Result<(Model, RunLog)> {
    let mut s = Session::with_model(model, cfg)?;
    s.run(cfg, data, &mut RunOptions::default())?;
    Ok((s.model, s.log))
}
