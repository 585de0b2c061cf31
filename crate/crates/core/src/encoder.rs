//! Multimodal encoder: a per-timestep patch transformer over the image
//! series, an MLP adapter over the weather series, and cross-attention
//! fusion producing the shared latent sequence Z (T×d). Imagery queries
//! weather; a learned temporal embedding is added after fusion.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamSet, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderCfg {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub b: usize,
    pub n_d: usize,
    pub m: usize,
    pub d: usize,
    pub patch_size: usize,
    pub n_layers_img: usize,
    pub n_heads: usize,
    pub adapter_hidden: usize,
    pub mlp_ratio: usize,
    /// Fixed per-variable normalization applied to raw weather inputs.
    pub met_shift: Vec<f64>,
    pub met_scale: Vec<f64>,
}

impl Default for EncoderCfg {
    fn default() -> Self {
        EncoderCfg {
            t: 24,
            h: 32,
            w: 32,
            b: 4,
            n_d: 7,
            m: 3,
            d: 64,
            patch_size: 8,
            n_layers_img: 1,
            n_heads: 2,
            adapter_hidden: 64,
            mlp_ratio: 2,
            met_shift: vec![15.0, 3.0, 60.0],
            met_scale: vec![10.0, 2.0, 15.0],
        }
    }
}

impl EncoderCfg {
    pub fn validate(&self) -> Result<()> {
        if self.h % self.patch_size != 0 || self.w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "H={} and W={} must be divisible by patch_size={}",
                self.h, self.w, self.patch_size
            )));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.met_shift.len() != self.m || self.met_scale.len() != self.m {
            return Err(Error::Config("met_shift/met_scale must have length M".into()));
        }
        if self.met_scale.iter().any(|&s| s == 0.0) {
            return Err(Error::Config("met_scale entries must be nonzero".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.h / self.patch_size) * (self.w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.b
    }
}

pub struct FusionOut {
    /// Fused latent sequence, T×d.
    pub z: Var,
    /// Cross-attention weights, T×T (rows sum to 1).
    pub attn: Var,
}

pub struct Encoder {
    pub cfg: EncoderCfg,
    /// Per-frame gather maps from the flat T×H×W×B input to patch rows.
    patch_maps: Vec<Arc<Vec<usize>>>,
    /// Column-slice maps [P×d] → [P×dh] per attention head.
    head_maps: Vec<Arc<Vec<usize>>>,
}

const LN_EPS: f64 = 1e-6;

impl Encoder {
    pub fn new(cfg: EncoderCfg) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let (ph, pw) = (cfg.h / p, cfg.w / p);
        let mut patch_maps = Vec::with_capacity(cfg.t);
        for t in 0..cfg.t {
            let frame_off = t * cfg.h * cfg.w * cfg.b;
            let mut map = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
            for py in 0..ph {
                for px in 0..pw {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (py * p + dy, px * p + dx);
                            for band in 0..cfg.b {
                                map.push(frame_off + (y * cfg.w + x) * cfg.b + band);
                            }
                        }
                    }
                }
            }
            patch_maps.push(Arc::new(map));
        }
        let dh = cfg.d / cfg.n_heads;
        let mut head_maps = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let mut map = Vec::with_capacity(cfg.n_patches() * dh);
            for row in 0..cfg.n_patches() {
                for c in 0..dh {
                    map.push(row * cfg.d + h * dh + c);
                }
            }
            head_maps.push(Arc::new(map));
        }
        Ok(Encoder { cfg, patch_maps, head_maps })
    }

    /// Register all encoder parameters under the `enc.` prefix.
    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let c = &self.cfg;
        let d = c.d;
        let w_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        ps.add_normal("enc.patch.w", vec![c.patch_dim(), d], w_std(c.patch_dim()), rng);
        ps.add_zeros("enc.patch.b", vec![d]);
        ps.add_normal("enc.pos_patch", vec![c.n_patches(), d], 0.02, rng);
        for l in 0..c.n_layers_img {
            for name in ["wq", "wk", "wv", "wo"] {
                ps.add_normal(&format!("enc.img{l}.{name}"), vec![d, d], w_std(d), rng);
            }
            ps.add(&format!("enc.img{l}.ln1.g"), vec![d], vec![1.0; d]);
            ps.add_zeros(&format!("enc.img{l}.ln1.b"), vec![d]);
            ps.add(&format!("enc.img{l}.ln2.g"), vec![d], vec![1.0; d]);
            ps.add_zeros(&format!("enc.img{l}.ln2.b"), vec![d]);
            let hid = d * c.mlp_ratio;
            ps.add_normal(&format!("enc.img{l}.mlp.w1"), vec![d, hid], w_std(d), rng);
            ps.add_zeros(&format!("enc.img{l}.mlp.b1"), vec![hid]);
            ps.add_normal(&format!("enc.img{l}.mlp.w2"), vec![hid, d], w_std(hid), rng);
            ps.add_zeros(&format!("enc.img{l}.mlp.b2"), vec![d]);
        }
        let flat = c.n_d * c.m;
        ps.add_normal("enc.adapter.w1", vec![flat, c.adapter_hidden], w_std(flat), rng);
        ps.add_zeros("enc.adapter.b1", vec![c.adapter_hidden]);
        ps.add_normal("enc.adapter.w2", vec![c.adapter_hidden, d], w_std(c.adapter_hidden), rng);
        ps.add_zeros("enc.adapter.b2", vec![d]);
        for name in ["wq", "wk", "wv"] {
            ps.add_normal(&format!("enc.fuse.{name}"), vec![d, d], w_std(d), rng);
        }
        ps.add("enc.fuse.ln.g", vec![d], vec![1.0; d]);
        ps.add_zeros("enc.fuse.ln.b", vec![d]);
        ps.add_normal("enc.pos_time", vec![c.t, d], 0.02, rng);
    }

    fn ln_affine(&self, g: &mut Graph, b: &BoundParams, x: Var, prefix: &str) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let scaled = g.mul_row(n, b.var(&format!("{prefix}.g")));
        g.add_row(scaled, b.var(&format!("{prefix}.b")))
    }

    /// Per-timestep image encoding: T×H×W×B (flat, row-major) → T×d.
    /// Row t depends only on frame t.
    pub fn encode_sits(&self, g: &mut Graph, b: &BoundParams, sits: &[f64]) -> Var {
        let c = &self.cfg;
        assert_eq!(sits.len(), c.t * c.h * c.w * c.b, "encode_sits: input size");
        let input = g.leaf(vec![c.t * c.h * c.w * c.b], sits.to_vec());
        let dh = c.d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut frame_feats = Vec::with_capacity(c.t);
        for t in 0..c.t {
            let patches = g.reindex(
                input,
                vec![c.n_patches(), c.patch_dim()],
                Arc::clone(&self.patch_maps[t]),
            );
            let emb = g.matmul(patches, b.var("enc.patch.w"));
            let emb = g.add_row(emb, b.var("enc.patch.b"));
            let mut tok = g.add(emb, b.var("enc.pos_patch"));
            for l in 0..c.n_layers_img {
                let p = format!("enc.img{l}");
                let h1 = self.ln_affine(g, b, tok, &format!("{p}.ln1"));
                let q = g.matmul(h1, b.var(&format!("{p}.wq")));
                let k = g.matmul(h1, b.var(&format!("{p}.wk")));
                let v = g.matmul(h1, b.var(&format!("{p}.wv")));
                let mut heads = Vec::with_capacity(c.n_heads);
                for hm in &self.head_maps {
                    let qh = g.reindex(q, vec![c.n_patches(), dh], Arc::clone(hm));
                    let kh = g.reindex(k, vec![c.n_patches(), dh], Arc::clone(hm));
                    let vh = g.reindex(v, vec![c.n_patches(), dh], Arc::clone(hm));
                    let kt = g.transpose(kh);
                    let scores = g.matmul(qh, kt);
                    let scores = g.scale(scores, scale);
                    let attn = g.softmax_rows(scores);
                    let out = g.matmul(attn, vh);
                    heads.push(g.transpose(out)); // dh×P
                }
                let mut cat = heads[0];
                for &h in &heads[1..] {
                    cat = g.concat_rows(cat, h); // d×P
                }
                let merged = g.transpose(cat); // P×d, head-major columns
                let proj = g.matmul(merged, b.var(&format!("{p}.wo")));
                tok = g.add(tok, proj);
                let h2 = self.ln_affine(g, b, tok, &format!("{p}.ln2"));
                let m1 = g.matmul(h2, b.var(&format!("{p}.mlp.w1")));
                let m1 = g.add_row(m1, b.var(&format!("{p}.mlp.b1")));
                let m1 = g.tanh(m1);
                let m2 = g.matmul(m1, b.var(&format!("{p}.mlp.w2")));
                let m2 = g.add_row(m2, b.var(&format!("{p}.mlp.b2")));
                tok = g.add(tok, m2);
            }
            frame_feats.push(g.mean_rows(tok));
        }
        g.stack_rows(&frame_feats)
    }

    /// Weather adapter: T×N_d×M (flat) → T×d, rowwise over timesteps.
    pub fn encode_mts(&self, g: &mut Graph, b: &BoundParams, mts: &[f64]) -> Var {
        let c = &self.cfg;
        assert_eq!(mts.len(), c.t * c.n_d * c.m, "encode_mts: input size");
        let normalized: Vec<f64> = mts
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = i % c.m;
                (v - self.cfg.met_shift[m]) / self.cfg.met_scale[m]
            })
            .collect();
        let x = g.leaf(vec![c.t, c.n_d * c.m], normalized);
        let h = g.matmul(x, b.var("enc.adapter.w1"));
        let h = g.add_row(h, b.var("enc.adapter.b1"));
        let h = g.tanh(h);
        let out = g.matmul(h, b.var("enc.adapter.w2"));
        g.add_row(out, b.var("enc.adapter.b2"))
    }

    /// Cross-attention fusion (imagery queries weather) with a residual
    /// path, layer normalization, then the temporal embedding.
    pub fn fuse(&self, g: &mut Graph, b: &BoundParams, img: Var, met: Var) -> FusionOut {
        let d = self.cfg.d;
        let q = g.matmul(img, b.var("enc.fuse.wq"));
        let k = g.matmul(met, b.var("enc.fuse.wk"));
        let v = g.matmul(met, b.var("enc.fuse.wv"));
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let cross = g.matmul(attn, v);
        let res = g.add(img, cross);
        let zn = self.ln_affine(g, b, res, "enc.fuse.ln");
        let z = g.add(zn, b.var("enc.pos_time"));
        FusionOut { z, attn }
    }

    pub fn forward(&self, g: &mut Graph, b: &BoundParams, sits: &[f64], mts: &[f64]) -> FusionOut {
        let img = self.encode_sits(g, b, sits);
        let met = self.encode_mts(g, b, mts);
        self.fuse(g, b, img, met)
    }
}
