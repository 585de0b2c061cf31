//! Run configuration: one JSON document tying together data generation,
//! model dimensions, both training stages and evaluation settings.
//!
//! Every field has a default, so `{}` is a valid config file; CLI flags
//! override individual fields after parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::GenConfig;
use crate::decoder::{BiasMode, DecoderCfg};
use crate::encoder::EncoderCfg;
use crate::error::{Error, Result};
use crate::trainer::{FinetuneCfg, PretrainCfg};

/// Model dimensions shared by the encoder and decoder. Data dimensions
/// (T, H, W, bands, days, variables) live in [`GenConfig`]; joining the
/// two yields concrete [`EncoderCfg`] / [`DecoderCfg`] values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    pub d: usize,
    pub patch_size: usize,
    pub n_layers_img: usize,
    pub n_heads: usize,
    pub adapter_hidden: usize,
    pub mlp_ratio: usize,
    pub met_shift: Vec<f64>,
    pub met_scale: Vec<f64>,
    pub windows: Vec<usize>,
    pub n_blocks: usize,
    pub head_hidden: usize,
    pub use_bank: bool,
    pub use_phen_bias: bool,
    pub bias_mode: BiasMode,
}

impl Default for ModelCfg {
    fn default() -> Self {
        let e = EncoderCfg::default();
        let d = DecoderCfg::default();
        ModelCfg {
            d: e.d,
            patch_size: e.patch_size,
            n_layers_img: e.n_layers_img,
            n_heads: e.n_heads,
            adapter_hidden: e.adapter_hidden,
            mlp_ratio: e.mlp_ratio,
            met_shift: e.met_shift,
            met_scale: e.met_scale,
            windows: d.windows,
            n_blocks: d.n_blocks,
            head_hidden: d.head_hidden,
            use_bank: d.use_bank,
            use_phen_bias: d.use_phen_bias,
            bias_mode: d.bias_mode,
        }
    }
}

/// Evaluation settings for the robustness split and the sensitivity probe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    /// Fraction of samples assigned to the stable cohort.
    pub volatility_quantile: f64,
    /// Weather variable index perturbed by the sensitivity probe.
    pub sensitivity_variable: usize,
    /// Additive perturbation applied by the sensitivity probe.
    pub sensitivity_delta: f64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            volatility_quantile: 0.7,
            sensitivity_variable: 0,
            sensitivity_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory (written by gen-data, read by everything else).
    pub data_dir: String,
    /// Output directory for checkpoints, logs and reports.
    pub out_dir: String,
    pub gen: GenConfig,
    pub model: ModelCfg,
    pub pretrain: PretrainCfg,
    pub finetune: FinetuneCfg,
    pub eval: EvalCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_dir: "data".into(),
            out_dir: "out".into(),
            gen: GenConfig::default(),
            model: ModelCfg::default(),
            pretrain: PretrainCfg::default(),
            finetune: FinetuneCfg::default(),
            eval: EvalCfg::default(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON config file. Unknown fields are rejected so typos
    /// fail loudly instead of silently falling back to defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every field range and the cross-field dimension contracts.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.encoder_cfg().validate()?;
        self.decoder_cfg().validate()?;
        if !(self.eval.volatility_quantile > 0.0 && self.eval.volatility_quantile < 1.0) {
            return Err(Error::Config(
                "eval.volatility_quantile must lie strictly in (0, 1)".into(),
            ));
        }
        if self.eval.sensitivity_variable >= self.gen.m {
            return Err(Error::Config(format!(
                "eval.sensitivity_variable {} out of range for {} weather variables",
                self.eval.sensitivity_variable, self.gen.m
            )));
        }
        if self.eval.sensitivity_delta == 0.0 || !self.eval.sensitivity_delta.is_finite() {
            return Err(Error::Config(
                "eval.sensitivity_delta must be finite and nonzero".into(),
            ));
        }
        if !(self.finetune.val_fraction > 0.0 && self.finetune.val_fraction < 1.0) {
            return Err(Error::Config(
                "finetune.val_fraction must lie strictly in (0, 1)".into(),
            ));
        }
        for (name, lr) in [
            ("pretrain.base_lr", self.pretrain.base_lr),
            ("finetune.base_lr", self.finetune.base_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// Encoder dimensions: data shape from `gen`, capacity from `model`.
    pub fn encoder_cfg(&self) -> EncoderCfg {
        EncoderCfg {
            t: self.gen.t,
            h: self.gen.h,
            w: self.gen.w,
            b: self.gen.b,
            n_d: self.gen.n_d,
            m: self.gen.m,
            d: self.model.d,
            patch_size: self.model.patch_size,
            n_layers_img: self.model.n_layers_img,
            n_heads: self.model.n_heads,
            adapter_hidden: self.model.adapter_hidden,
            mlp_ratio: self.model.mlp_ratio,
            met_shift: self.model.met_shift.clone(),
            met_scale: self.model.met_scale.clone(),
        }
    }

    pub fn decoder_cfg(&self) -> DecoderCfg {
        DecoderCfg {
            t: self.gen.t,
            d: self.model.d,
            n_crops: self.gen.crops.len(),
            windows: self.model.windows.clone(),
            n_blocks: self.model.n_blocks,
            head_hidden: self.model.head_hidden,
            use_bank: self.model.use_bank,
            use_phen_bias: self.model.use_phen_bias,
            bias_mode: self.model.bias_mode,
        }
    }

    /// Keep only the named crops, reassigning contiguous crop ids so the
    /// phenology bank stays densely indexed.
    pub fn restrict_crops(&mut self, names: &[String]) -> Result<()> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("crop list is empty".into()));
        }
        let mut kept = Vec::new();
        for name in names {
            let spec = self
                .gen
                .crops
                .iter()
                .find(|c| &c.name == name)
                .cloned()
                .ok_or_else(|| Error::Lookup(format!("unknown crop '{name}'")))?;
            if kept.iter().any(|c: &crate::datagen::CropSpec| c.name == spec.name) {
                return Err(Error::InvalidArgument(format!("crop '{name}' listed twice")));
            }
            kept.push(spec);
        }
        for (i, c) in kept.iter_mut().enumerate() {
            c.crop_id = i;
        }
        self.gen.crops = kept;
        Ok(())
    }

    /// Single-crop mode: restrict to one crop and drop the per-crop bank,
    /// leaving a single shared decoder query.
    pub fn single_crop(&mut self, name: &str) -> Result<()> {
        self.restrict_crops(&[name.to_string()])?;
        self.model.use_bank = false;
        Ok(())
    }
}
