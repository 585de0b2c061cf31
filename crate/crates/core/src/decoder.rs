//! Crop-aware temporal decoder: phenology bank lookup, multi-scale
//! trend/variation decomposition, phenology bias, phenology-guided
//! attention blocks, regression head, and the log-space loss.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamSet, Var};

/// How the trend/variation attention matrices reduce to a length-T bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Row of the prepended cls position, restricted to sequence positions.
    ClsRow,
    /// Column mean over all rows, restricted to sequence positions.
    MeanRows,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderCfg {
    pub t: usize,
    pub d: usize,
    pub n_crops: usize,
    pub windows: Vec<usize>,
    pub n_blocks: usize,
    pub head_hidden: usize,
    /// Per-crop query bank; when off a single shared query is used.
    pub use_bank: bool,
    /// Phenology bias injection into the attention logits.
    pub use_phen_bias: bool,
    pub bias_mode: BiasMode,
}

impl Default for DecoderCfg {
    fn default() -> Self {
        DecoderCfg {
            t: 24,
            d: 64,
            n_crops: 4,
            windows: vec![3, 6, 12],
            n_blocks: 2,
            head_hidden: 64,
            use_bank: true,
            use_phen_bias: true,
            bias_mode: BiasMode::ClsRow,
        }
    }
}

impl DecoderCfg {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::Config("at least one pooling window required".into()));
        }
        let max_w = *self.windows.iter().max().unwrap();
        if self.t < max_w {
            return Err(Error::Config(format!(
                "T={} is shorter than the largest pooling window {}",
                self.t, max_w
            )));
        }
        if self.n_crops == 0 {
            return Err(Error::Config("n_crops must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be positive".into()));
        }
        Ok(())
    }
}

pub struct Decoder {
    pub cfg: DecoderCfg,
}

pub struct DecompOut {
    /// Trend, T×d.
    pub mu: Var,
    /// Variation, T×d; mu + nu reconstructs Z exactly.
    pub nu: Var,
    /// Per-timestep mixture weights over windows, T×K.
    pub mix_weights: Var,
}

pub struct DecoderOut {
    /// Predicted log-yield, scalar node.
    pub log_yield: Var,
    /// Crop-aware embedding after the attention blocks, 1×d.
    pub h: Var,
    /// Attention weight rows per block, each 1×T.
    pub attn: Vec<Var>,
    pub decomp: DecompOut,
    /// Phenology bias, length T (zeros when disabled).
    pub b_ph: Var,
}

const LN_EPS: f64 = 1e-6;
/// Additive logit mask for excluded timesteps.
pub const MASK_NEG: f64 = f64::NEG_INFINITY;

impl Decoder {
    pub fn new(cfg: DecoderCfg) -> Result<Self> {
        cfg.validate()?;
        Ok(Decoder { cfg })
    }

    /// Register decoder parameters under the `dec.` prefix. Bank queries are
    /// standard-normal; projections use 1/√fan_in.
    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let c = &self.cfg;
        let d = c.d;
        let w_std = 1.0 / (d as f64).sqrt();
        if c.use_bank {
            ps.add_normal("dec.bank", vec![c.n_crops, d], 1.0, rng);
        } else {
            ps.add_normal("dec.query", vec![d], 1.0, rng);
        }
        ps.add_normal("dec.mix.w", vec![d, c.windows.len()], w_std, rng);
        ps.add_zeros("dec.mix.b", vec![c.windows.len()]);
        if c.use_phen_bias {
            for path in ["mu", "nu"] {
                ps.add_normal(&format!("dec.bias.wq_{path}"), vec![d, d], w_std, rng);
                ps.add_normal(&format!("dec.bias.wk_{path}"), vec![d, d], w_std, rng);
                ps.add_normal(&format!("dec.bias.cls_{path}"), vec![d], 0.02, rng);
            }
            ps.add("dec.bias.lambda_mu", vec![1], vec![0.5]);
            ps.add("dec.bias.lambda_nu", vec![1], vec![0.5]);
        }
        for blk in 0..c.n_blocks {
            for name in ["wq", "wk", "wv"] {
                ps.add_normal(&format!("dec.cpa{blk}.{name}"), vec![d, d], w_std, rng);
            }
            ps.add(&format!("dec.cpa{blk}.ln.g"), vec![d], vec![1.0; d]);
            ps.add_zeros(&format!("dec.cpa{blk}.ln.b"), vec![d]);
        }
        ps.add_normal("dec.head.w1", vec![d, c.head_hidden], w_std, rng);
        ps.add_zeros("dec.head.b1", vec![c.head_hidden]);
        ps.add_normal("dec.head.w2", vec![c.head_hidden, 1], 1.0 / (c.head_hidden as f64).sqrt(), rng);
        ps.add_zeros("dec.head.b2", vec![1]);
    }

    /// Multi-scale trend/variation split: μ is a per-timestep softmax
    /// mixture of pooled sequences, ν the residual.
    pub fn decompose(&self, g: &mut Graph, b: &BoundParams, z: Var) -> DecompOut {
        let c = &self.cfg;
        let logits = g.matmul(z, b.var("dec.mix.w"));
        let logits = g.add_row(logits, b.var("dec.mix.b"));
        let mix_weights = g.softmax_rows(logits); // T×K
        let t = g.dims(z)[0];
        let k_count = c.windows.len();
        let mut mu: Option<Var> = None;
        for (ki, &k) in c.windows.iter().enumerate() {
            let pooled = g.moving_average_rows(z, k);
            let col_map: Vec<usize> = (0..t).map(|r| r * k_count + ki).collect();
            let wk = g.reindex(mix_weights, vec![t], Arc::new(col_map));
            let weighted = g.mul_col(pooled, wk);
            mu = Some(match mu {
                None => weighted,
                Some(acc) => g.add(acc, weighted),
            });
        }
        let mu = mu.expect("windows nonempty");
        let nu = g.sub(z, mu);
        DecompOut { mu, nu, mix_weights }
    }

    /// Scaled trend/variation self-similarity reduced to a length-T bias,
    /// weighted by the learnable λ scalars.
    pub fn phenology_bias(&self, g: &mut Graph, b: &BoundParams, mu: Var, nu: Var) -> Var {
        let c = &self.cfg;
        let t = g.dims(mu)[0];
        let scale = 1.0 / (c.d as f64).sqrt();
        let mut rows = Vec::with_capacity(2);
        for (path, comp) in [("mu", mu), ("nu", nu)] {
            let cls = b.var(&format!("dec.bias.cls_{path}"));
            let cls_row = g.reshape(cls, vec![1, c.d]);
            let tilde = g.concat_rows(cls_row, comp); // (T+1)×d
            let q = g.matmul(tilde, b.var(&format!("dec.bias.wq_{path}")));
            let k = g.matmul(tilde, b.var(&format!("dec.bias.wk_{path}")));
            let kt = g.transpose(k);
            let a = g.matmul(q, kt);
            let a = g.scale(a, scale); // (T+1)×(T+1)
            let reduced = match c.bias_mode {
                BiasMode::ClsRow => g.row(a, 0),
                BiasMode::MeanRows => g.mean_rows(a),
            };
            // keep the T sequence positions, drop the cls column
            let seq = g.reindex(reduced, vec![t], Arc::new((1..=t).collect()));
            let lambda = b.var(&format!("dec.bias.lambda_{path}"));
            rows.push(g.scale_by(seq, lambda));
        }
        let (a, b_) = (rows[0], rows[1]);
        g.add(a, b_)
    }

    fn query_var(&self, g: &mut Graph, b: &BoundParams, crop_id: usize) -> Result<Var> {
        if self.cfg.use_bank {
            if crop_id >= self.cfg.n_crops {
                return Err(Error::Lookup(format!(
                    "crop id {} outside bank of size {}",
                    crop_id, self.cfg.n_crops
                )));
            }
            let bank = b.var("dec.bank");
            Ok(g.row(bank, crop_id))
        } else {
            Ok(b.var("dec.query"))
        }
    }

    /// Stacked phenology-guided attention over Z for one crop query.
    /// `season_mask`, when given, is added to every block's logits
    /// (0 inside the window, −∞ outside).
    pub fn cpa_forward(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        crop_id: usize,
        z: Var,
        b_ph: Var,
        season_mask: Option<&[f64]>,
    ) -> Result<(Var, Vec<Var>)> {
        let c = &self.cfg;
        let t = g.dims(z)[0];
        if let Some(m) = season_mask {
            assert_eq!(m.len(), t, "season mask length");
        }
        let scale = 1.0 / (c.d as f64).sqrt();
        let query = self.query_var(g, b, crop_id)?;
        let mut h = g.reshape(query, vec![1, c.d]);
        let bias_row = g.reshape(b_ph, vec![1, t]);
        let mask_leaf = season_mask.map(|m| g.leaf(vec![1, t], m.to_vec()));
        let mut attn_rows = Vec::with_capacity(c.n_blocks);
        for blk in 0..c.n_blocks {
            let p = format!("dec.cpa{blk}");
            let q = g.matmul(h, b.var(&format!("{p}.wq"))); // 1×d
            let k = g.matmul(z, b.var(&format!("{p}.wk")));
            let v = g.matmul(z, b.var(&format!("{p}.wv")));
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt);
            let mut logits = g.scale(logits, scale);
            logits = g.add(logits, bias_row);
            if let Some(mask) = mask_leaf {
                logits = g.add(logits, mask);
            }
            let weights = g.softmax_rows(logits); // 1×T
            attn_rows.push(weights);
            let att = g.matmul(weights, v); // 1×d
            let res = g.add(h, att);
            let n = g.layer_norm_rows(res, LN_EPS);
            let n = g.mul_row(n, b.var(&format!("{p}.ln.g")));
            h = g.add_row(n, b.var(&format!("{p}.ln.b")));
        }
        Ok((h, attn_rows))
    }

    /// Regression head: 1×d → scalar log-yield.
    pub fn predict_log_yield(&self, g: &mut Graph, b: &BoundParams, h: Var) -> Var {
        let h1 = g.matmul(h, b.var("dec.head.w1"));
        let h1 = g.add_row(h1, b.var("dec.head.b1"));
        let h1 = g.tanh(h1);
        let out = g.matmul(h1, b.var("dec.head.w2"));
        let out = g.add_row(out, b.var("dec.head.b2"));
        g.reshape(out, vec![1])
    }

    /// Full decoder pass from a fused latent sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        z: Var,
        crop_id: usize,
        season_mask: Option<&[f64]>,
    ) -> Result<DecoderOut> {
        let t = g.dims(z)[0];
        let decomp = self.decompose(g, b, z);
        let b_ph = if self.cfg.use_phen_bias {
            self.phenology_bias(g, b, decomp.mu, decomp.nu)
        } else {
            g.leaf(vec![t], vec![0.0; t])
        };
        let (h, attn) = self.cpa_forward(g, b, crop_id, z, b_ph, season_mask)?;
        let log_yield = self.predict_log_yield(g, b, h);
        Ok(DecoderOut { log_yield, h, attn, decomp, b_ph })
    }
}

/// Additive attention mask for a growing season window: 0 on steps in
/// [sos, eos] (inclusive, clamped to T), −∞ elsewhere.
pub fn growing_season_mask(t: usize, sos: usize, eos: usize) -> Result<Vec<f64>> {
    let hi = eos.min(t - 1);
    if sos > hi {
        return Err(Error::Config(format!(
            "empty season window [{sos}, {eos}] for T={t}"
        )));
    }
    Ok((0..t)
        .map(|i| if i >= sos && i <= hi { 0.0 } else { MASK_NEG })
        .collect())
}

/// Additive attention mask admitting only [sos, cutoff] (prefix evaluation).
pub fn prefix_mask(t: usize, sos: usize, cutoff: usize) -> Result<Vec<f64>> {
    growing_season_mask(t, sos, cutoff)
}

/// Mean squared error in log space over positive predictions/targets.
pub fn mse_log_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "mse_log_loss: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&p, &y)) in predictions.iter().zip(targets).enumerate() {
        if p <= 0.0 {
            return Err(Error::Domain(format!("nonpositive prediction at sample {i}: {p}")));
        }
        if y <= 0.0 {
            return Err(Error::Domain(format!("nonpositive target at sample {i}: {y}")));
        }
        let d = p.ln() - y.ln();
        acc += d * d;
    }
    Ok(acc / predictions.len() as f64)
}

/// In-graph batch loss from per-sample log-yield nodes and positive targets.
pub fn log_mse_loss_graph(g: &mut Graph, log_preds: &[Var], targets: &[f64]) -> Var {
    assert_eq!(log_preds.len(), targets.len());
    assert!(!targets.is_empty());
    assert!(targets.iter().all(|&y| y > 0.0), "targets must be positive");
    let preds = g.stack_rows(log_preds); // N×1
    let logs = g.leaf(vec![targets.len(), 1], targets.iter().map(|y| y.ln()).collect());
    let diff = g.sub(preds, logs);
    let sq = g.sqr(diff);
    g.mean_all(sq)
}
