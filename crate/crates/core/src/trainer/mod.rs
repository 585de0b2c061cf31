//! Two-stage training pipeline: contrastive pretraining of the
//! encoder, then supervised decoder fine-tuning with the encoder
//! frozen. Also the trained-model bundle used by evaluation.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{Checkpoint, Stage, CKPT_MAGIC, CKPT_VERSION};
pub use optim::{cosine_warmup_lr, AdamWConfig, OptimState};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::decoder::{growing_season_mask, log_mse_loss_graph, mse_log_loss, Decoder};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamGrads, ParamSet};
use crate::pretrain::{
    apply_mask, make_views, pool_representation, sample_temporal_mask, tca_loss,
    ContrastiveBatch, TemporalMask,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub grad_clip: Option<f64>,
}

impl Default for PretrainCfg {
    fn default() -> Self {
        PretrainCfg {
            epochs: 20,
            batch_size: 16,
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            warmup_epochs: 2,
            mask_ratio: crate::pretrain::DEFAULT_MASK_RATIO,
            temperature: crate::pretrain::DEFAULT_TEMPERATURE,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub grad_clip: Option<f64>,
    pub from_scratch: bool,
}

impl Default for FinetuneCfg {
    fn default() -> Self {
        FinetuneCfg {
            epochs: 30,
            batch_size: 16,
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            warmup_epochs: 2,
            patience: 10,
            val_fraction: 0.2,
            grad_clip: Some(1.0),
            from_scratch: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
}

fn write_log(path: &Path, entries: &[LogEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Keep-mask for a crop window: 1 on [sos, eos] (clamped), 0 elsewhere.
pub fn window_keep_mask(t: usize, sos: usize, eos: usize) -> TemporalMask {
    let hi = eos.min(t.saturating_sub(1));
    TemporalMask {
        keep: (0..t).map(|i| u8::from(i >= sos && i <= hi)).collect(),
    }
}

fn copy_params(dst: &mut ParamSet, src: &ParamSet) {
    assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst.by_index_mut(i).value.data.copy_from_slice(&src.by_index(i).value.data);
    }
}

fn clip_grads(grads: &mut ParamGrads, clip: Option<f64>) {
    if let Some(max_norm) = clip {
        let norm = grads.global_norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

/// Trained (or initialized) model bundle: both submodules with their
/// parameter sets.
pub struct Model {
    pub enc: Encoder,
    pub dec: Decoder,
    pub enc_ps: ParamSet,
    pub dec_ps: ParamSet,
}

impl Model {
    /// Encode one sample restricted to a window: timesteps outside
    /// [sos, eos] are zeroed in both modalities before encoding, the
    /// same path the pretraining masks use. Returns the fused T×d
    /// sequence as raw data.
    pub fn encode_window(
        &self,
        sits: &[f64],
        mts: &[f64],
        sos: usize,
        eos: usize,
    ) -> Result<Vec<f64>> {
        let t = self.enc.cfg.t;
        let keep = window_keep_mask(t, sos, eos);
        let (s, m) = apply_mask(sits, mts, t, &keep)?;
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &self.enc_ps);
        let z = self.enc.forward(&mut g, &b, &s, &m).z;
        Ok(g.data(z).to_vec())
    }

    /// Decode a cached latent sequence to a physical-unit yield. The
    /// window also masks attention inside the decoder.
    pub fn predict_from_latent(
        &self,
        z_data: &[f64],
        crop_id: usize,
        sos: usize,
        eos: usize,
    ) -> Result<f64> {
        let t = self.enc.cfg.t;
        let mask = growing_season_mask(t, sos, eos)?;
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &self.dec_ps);
        let z = g.leaf(vec![t, self.enc.cfg.d], z_data.to_vec());
        let out = self.dec.forward(&mut g, &b, z, crop_id, Some(&mask))?;
        Ok(g.data(out.log_yield)[0].exp())
    }

    /// Full forward pass for one sample over a window.
    pub fn predict(
        &self,
        sits: &[f64],
        mts: &[f64],
        crop_id: usize,
        sos: usize,
        eos: usize,
    ) -> Result<f64> {
        let z = self.encode_window(sits, mts, sos, eos)?;
        self.predict_from_latent(&z, crop_id, sos, eos)
    }
}

/// Stage I: optimize the encoder under the contrastive objective.
/// Writes `pretrain.ckpt` and `pretrain_log.jsonl` into `out_dir`.
pub fn run_pretrain(
    enc: &Encoder,
    ds: &Dataset,
    cfg: &PretrainCfg,
    seed: u64,
    out_dir: &Path,
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    enc.init_params(&mut ps, &mut rng);

    let train_idx = ds.train_indices();
    if train_idx.len() < 2 {
        return Err(Error::Config("pretraining needs at least 2 training samples".into()));
    }
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = train_idx
        .iter()
        .map(|&i| (ds.samples[i].sits.to_f64(), ds.samples[i].mts.to_f64()))
        .collect();

    let spe = inputs.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * spe;
    let warmup_steps = (cfg.warmup_epochs * spe).min(total_steps.saturating_sub(1));
    let mut opt = OptimState::new(
        &ps,
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: 1e-8,
        },
    );

    let t = enc.cfg.t;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last_good = ps.clone();
    let ckpt_path = out_dir.join("pretrain.ckpt");
    let log_path = out_dir.join("pretrain_log.jsonl");

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut epoch_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue; // contrastive loss needs in-batch negatives
            }
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, &ps);
            let mut anchors = Vec::with_capacity(batch.len());
            let mut positives = Vec::with_capacity(batch.len());
            for &i in batch {
                let ma = sample_temporal_mask(t, cfg.mask_ratio, &mut rng)?;
                let mb = sample_temporal_mask(t, cfg.mask_ratio, &mut rng)?;
                let (sits, mts) = &inputs[i];
                let (za, zb) = make_views(enc, &mut g, &b, sits, mts, &ma, &mb)?;
                anchors.push(pool_representation(&mut g, za));
                positives.push(pool_representation(&mut g, zb));
            }
            let batch_loss = tca_loss(
                &mut g,
                &ContrastiveBatch { anchors, positives, temperature: cfg.temperature },
            )?;
            let loss_val = g.data(batch_loss)[0];
            if !loss_val.is_finite() {
                let ck =
                    Checkpoint::new(Stage::Pretrain, seed, rng.get_word_pos(), step as u64, &[
                        &last_good,
                    ]);
                ck.save(&ckpt_path)?;
                write_log(&log_path, &log)?;
                return Err(Error::NonFinite(format!(
                    "pretraining loss diverged at epoch {epoch}; last good checkpoint kept"
                )));
            }
            let gs = g.backward(batch_loss);
            let mut grads = b.grads(&ps, &gs);
            clip_grads(&mut grads, cfg.grad_clip);
            let lr = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.base_lr);
            opt.step(&mut ps, &grads, lr)?;
            step += 1;
            epoch_loss += loss_val;
            epoch_batches += 1;
            epoch_lr = lr;
        }
        let mean_loss = epoch_loss / epoch_batches.max(1) as f64;
        log.push(LogEntry {
            epoch,
            stage: "pretrain".into(),
            loss: mean_loss,
            lr: epoch_lr,
        });
        last_good = ps.clone();
    }

    let ck = Checkpoint::new(Stage::Pretrain, seed, rng.get_word_pos(), step as u64, &[&ps]);
    ck.save(&ckpt_path)?;
    write_log(&log_path, &log)?;
    Ok((ck, log))
}

pub struct FinetuneOut {
    pub ckpt: Checkpoint,
    pub log: Vec<LogEntry>,
    pub model: Model,
    pub best_val_loss: f64,
    pub train_loss: f64,
}

/// Stage II: freeze the encoder, fine-tune the decoder under the
/// log-space loss with early stopping on a held-out split. Writes
/// `finetune.ckpt` and `finetune_log.jsonl` into `out_dir`.
pub fn run_finetune(
    enc: Encoder,
    dec: Decoder,
    ds: &Dataset,
    cfg: &FinetuneCfg,
    seed: u64,
    pretrained: Option<&Checkpoint>,
    out_dir: &Path,
) -> Result<FinetuneOut> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let enc_ps = match pretrained {
        Some(ck) => {
            if ck.stage != Stage::Pretrain {
                return Err(Error::Config(format!(
                    "fine-tuning requires a pretrain checkpoint, got stage '{}'",
                    ck.stage.as_str()
                )));
            }
            ck.param_set("enc.")?
        }
        None => {
            if !cfg.from_scratch {
                return Err(Error::Config(
                    "no pretrain checkpoint given; pass from_scratch to skip Stage I".into(),
                ));
            }
            let mut ps = ParamSet::new();
            enc.init_params(&mut ps, &mut rng);
            ps
        }
    };
    let enc_before: Vec<Vec<f64>> =
        enc_ps.iter().map(|p| p.value.data.clone()).collect();

    let mut dec_ps = ParamSet::new();
    dec.init_params(&mut dec_ps, &mut rng);

    let model = Model { enc, dec, enc_ps, dec_ps };
    let t = model.enc.cfg.t;
    let d = model.enc.cfg.d;

    // The frozen encoder is a fixed map, so each sample's latent
    // sequence is computed once up front.
    struct Cached {
        z: Vec<f64>,
        crop_id: usize,
        mask: Vec<f64>,
        target: f64,
    }
    let train_idx = ds.train_indices();
    if train_idx.len() < 2 {
        return Err(Error::Config("fine-tuning needs at least 2 training samples".into()));
    }
    let mut cached = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        let s = &ds.samples[i];
        let crop = ds.crop(s.rec.crop_id)?;
        let z = model.encode_window(&s.sits.to_f64(), &s.mts.to_f64(), crop.sos, crop.eos)?;
        cached.push(Cached {
            z,
            crop_id: s.rec.crop_id,
            mask: growing_season_mask(t, crop.sos, crop.eos)?,
            target: s.rec.yield_true,
        });
    }

    let mut order: Vec<usize> = (0..cached.len()).collect();
    order.shuffle(&mut rng);
    let val_n = ((cached.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, cached.len() - 1);
    let val_set: Vec<usize> = order[..val_n].to_vec();
    let mut train_set: Vec<usize> = order[val_n..].to_vec();

    let spe = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * spe;
    let warmup_steps = (cfg.warmup_epochs * spe).min(total_steps.saturating_sub(1));
    let mut model = model;
    let mut opt = OptimState::new(
        &model.dec_ps,
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: 1e-8,
        },
    );

    let eval_split = |model: &Model, set: &[usize]| -> Result<f64> {
        let mut preds = Vec::with_capacity(set.len());
        let mut targets = Vec::with_capacity(set.len());
        for &i in set {
            let c = &cached[i];
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, &model.dec_ps);
            let z = g.leaf(vec![t, d], c.z.clone());
            let out = model.dec.forward(&mut g, &b, z, c.crop_id, Some(&c.mask))?;
            preds.push(g.data(out.log_yield)[0].exp());
            targets.push(c.target);
        }
        mse_log_loss(&preds, &targets)
    };

    let mut log = Vec::new();
    let mut step = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params = model.dec_ps.clone();
    let mut since_best = 0usize;
    let log_path = out_dir.join("finetune_log.jsonl");

    for epoch in 0..cfg.epochs {
        train_set.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut epoch_lr = 0.0;
        for batch in train_set.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, &model.dec_ps);
            let mut preds = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let c = &cached[i];
                let z = g.leaf(vec![t, d], c.z.clone());
                let out = model.dec.forward(&mut g, &b, z, c.crop_id, Some(&c.mask))?;
                preds.push(out.log_yield);
                targets.push(c.target);
            }
            let loss = log_mse_loss_graph(&mut g, &preds, &targets);
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                copy_params(&mut model.dec_ps, &best_params);
                let ck = finetune_ckpt(&model, seed, rng.get_word_pos(), step as u64);
                ck.save(&out_dir.join("finetune.ckpt"))?;
                write_log(&log_path, &log)?;
                return Err(Error::NonFinite(format!(
                    "fine-tuning loss diverged at epoch {epoch}; best checkpoint kept"
                )));
            }
            let gs = g.backward(loss);
            let mut grads = b.grads(&model.dec_ps, &gs);
            clip_grads(&mut grads, cfg.grad_clip);
            let lr = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.base_lr);
            opt.step(&mut model.dec_ps, &grads, lr)?;
            step += 1;
            epoch_loss += loss_val;
            epoch_batches += 1;
            epoch_lr = lr;
        }
        log.push(LogEntry {
            epoch,
            stage: "finetune".into(),
            loss: epoch_loss / epoch_batches.max(1) as f64,
            lr: epoch_lr,
        });
        let val_loss = eval_split(&model, &val_set)?;
        if val_loss < best_val {
            best_val = val_loss;
            copy_params(&mut best_params, &model.dec_ps);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    copy_params(&mut model.dec_ps, &best_params);

    for (p, before) in model.enc_ps.iter().zip(&enc_before) {
        assert_eq!(&p.value.data, before, "encoder parameter '{}' changed in Stage II", p.name);
    }

    let train_loss = eval_split(&model, &(0..cached.len()).collect::<Vec<_>>())?;
    let ck = finetune_ckpt(&model, seed, rng.get_word_pos(), step as u64);
    ck.save(&out_dir.join("finetune.ckpt"))?;
    write_log(&log_path, &log)?;
    Ok(FinetuneOut { ckpt: ck, log, model, best_val_loss: best_val, train_loss })
}

fn finetune_ckpt(model: &Model, seed: u64, word_pos: u128, step: u64) -> Checkpoint {
    Checkpoint::new(Stage::Finetune, seed, word_pos, step, &[&model.enc_ps, &model.dec_ps])
}

/// Rebuild a model from a fine-tune checkpoint.
pub fn model_from_checkpoint(enc: Encoder, dec: Decoder, ck: &Checkpoint) -> Result<Model> {
    if ck.stage != Stage::Finetune {
        return Err(Error::Config(format!(
            "evaluation requires a finetune checkpoint, got stage '{}'",
            ck.stage.as_str()
        )));
    }
    let enc_ps = ck.param_set("enc.")?;
    let dec_ps = ck.param_set("dec.")?;
    Ok(Model { enc, dec, enc_ps, dec_ps })
}

/// Untrained model with freshly initialized parameters.
pub fn init_model(enc: Encoder, dec: Decoder, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_ps = ParamSet::new();
    enc.init_params(&mut enc_ps, &mut rng);
    let mut dec_ps = ParamSet::new();
    dec.init_params(&mut dec_ps, &mut rng);
    Model { enc, dec, enc_ps, dec_ps }
}
