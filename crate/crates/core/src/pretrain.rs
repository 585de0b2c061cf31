//! Temporal contrastive pretraining: masked views shared across
//! modalities, mean-pooled sequence representations, and an InfoNCE
//! loss over in-batch negatives.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, Var};

pub const DEFAULT_MASK_RATIO: f64 = 0.3;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Binary keep/drop mask over timesteps; 1 keeps a step, 0 zeroes it
/// in every modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalMask {
    pub keep: Vec<u8>,
}

impl TemporalMask {
    pub fn all_ones(t: usize) -> Self {
        TemporalMask { keep: vec![1; t] }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0).count()
    }
}

/// Draw a mask with exactly round(T·ratio) zeroed positions, uniformly
/// without replacement.
pub fn sample_temporal_mask(t: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<TemporalMask> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask_ratio must be in [0, 1), got {mask_ratio}"
        )));
    }
    let n_masked = (t as f64 * mask_ratio).round() as usize;
    if t - n_masked < 1 {
        return Err(Error::InvalidArgument(format!(
            "mask would leave no timestep visible (T={t}, ratio={mask_ratio})"
        )));
    }
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let mut keep = vec![1u8; t];
    for &i in &idx[..n_masked] {
        keep[i] = 0;
    }
    Ok(TemporalMask { keep })
}

/// Zero the masked timesteps of both modalities. Frames are H·W·B
/// blocks, weather rows are N_d·M blocks; the same mask governs both.
pub fn apply_mask(
    sits: &[f64],
    mts: &[f64],
    t: usize,
    mask: &TemporalMask,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mask.len() != t {
        return Err(Error::InvalidArgument(format!(
            "mask length {} does not match T={t}",
            mask.len()
        )));
    }
    assert!(sits.len() % t == 0 && mts.len() % t == 0, "inputs not divisible by T");
    let frame = sits.len() / t;
    let row = mts.len() / t;
    let mut s = sits.to_vec();
    let mut m = mts.to_vec();
    for (ti, &k) in mask.keep.iter().enumerate() {
        if k == 0 {
            s[ti * frame..(ti + 1) * frame].fill(0.0);
            m[ti * row..(ti + 1) * row].fill(0.0);
        }
    }
    Ok((s, m))
}

/// Encode two masked views of one sample into fused latent sequences.
pub fn make_views(
    enc: &Encoder,
    g: &mut Graph,
    b: &BoundParams,
    sits: &[f64],
    mts: &[f64],
    mask_a: &TemporalMask,
    mask_b: &TemporalMask,
) -> Result<(Var, Var)> {
    let t = enc.cfg.t;
    let (sa, ma) = apply_mask(sits, mts, t, mask_a)?;
    let (sb, mb) = apply_mask(sits, mts, t, mask_b)?;
    let za = enc.forward(g, b, &sa, &ma).z;
    let zb = enc.forward(g, b, &sb, &mb).z;
    Ok((za, zb))
}

/// Mean over the time axis: T×d → d.
pub fn pool_representation(g: &mut Graph, z: Var) -> Var {
    g.mean_rows(z)
}

/// Anchor and positive pooled representations with a temperature.
pub struct ContrastiveBatch {
    pub anchors: Vec<Var>,
    pub positives: Vec<Var>,
    pub temperature: f64,
}

/// InfoNCE over cosine similarities. Each anchor's denominator ranges
/// over every positive row; the other anchors' positives are its
/// negatives.
pub fn tca_loss(g: &mut Graph, batch: &ContrastiveBatch) -> Result<Var> {
    let n = batch.anchors.len();
    if n < 2 || batch.positives.len() != n {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs N >= 2 matched pairs, got {} anchors / {} positives",
            n,
            batch.positives.len()
        )));
    }
    if batch.temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            batch.temperature
        )));
    }
    let inv_tau = 1.0 / batch.temperature;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut sims = Vec::with_capacity(n);
        for j in 0..n {
            let s = g.cosine(batch.anchors[i], batch.positives[j]);
            sims.push(g.scale(s, inv_tau));
        }
        let row = g.stack_rows(&sims);
        rows.push(g.reshape(row, vec![1, n]));
    }
    let logits = match rows.len() {
        1 => rows[0],
        _ => {
            let mut acc = rows[0];
            for &r in &rows[1..] {
                acc = g.concat_rows(acc, r);
            }
            acc
        }
    };
    let probs = g.softmax_rows(logits); // N×N, diagonal is the positive
    let diag_idx: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let diag = g.reindex(probs, vec![n], std::sync::Arc::new(diag_idx));
    let logp = g.ln(diag);
    let mean = g.mean_all(logp);
    Ok(g.neg(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderCfg;
    use crate::numerics::ParamSet;
    use rand::{Rng, SeedableRng};

    fn tiny_encoder() -> (Encoder, ParamSet) {
        let cfg = EncoderCfg {
            t: 6,
            h: 8,
            w: 8,
            b: 2,
            n_d: 3,
            m: 3,
            d: 8,
            patch_size: 4,
            n_layers_img: 1,
            n_heads: 2,
            adapter_hidden: 8,
            mlp_ratio: 2,
            ..EncoderCfg::default()
        };
        let enc = Encoder::new(cfg).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        enc.init_params(&mut ps, &mut rng);
        (enc, ps)
    }

    fn random_sample(enc: &Encoder, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let c = &enc.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sits = (0..c.t * c.h * c.w * c.b).map(|_| rng.random::<f64>()).collect();
        let mts = (0..c.t * c.n_d * c.m)
            .map(|_| rng.random::<f64>() * 20.0)
            .collect();
        (sits, mts)
    }

    #[test]
    fn mask_counting_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_temporal_mask(8, 0.0, &mut rng).unwrap();
        assert_eq!(m.keep, vec![1; 8]);
        let m = sample_temporal_mask(8, 0.5, &mut rng).unwrap();
        assert_eq!(m.n_masked(), 4);
        let m = sample_temporal_mask(24, 0.3, &mut rng).unwrap();
        assert_eq!(m.n_masked(), 7); // round(24 * 0.3)
        assert!(sample_temporal_mask(8, 1.0, &mut rng).is_err());
        assert!(sample_temporal_mask(8, -0.1, &mut rng).is_err());
        assert!(sample_temporal_mask(1, 0.6, &mut rng).is_err());
    }

    #[test]
    fn mask_deterministic_for_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = sample_temporal_mask(24, 0.3, &mut r1).unwrap();
        let b = sample_temporal_mask(24, 0.3, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_vary_across_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<TemporalMask> =
            (0..8).map(|_| sample_temporal_mask(24, 0.3, &mut rng).unwrap()).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn identity_masks_give_identical_views() {
        let (enc, ps) = tiny_encoder();
        let (sits, mts) = random_sample(&enc, 1);
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &ps);
        let ones = TemporalMask::all_ones(6);
        let (za, zb) = make_views(&enc, &mut g, &b, &sits, &mts, &ones, &ones).unwrap();
        assert_eq!(g.data(za), g.data(zb));
    }

    #[test]
    fn masked_frame_perturbation_is_invisible() {
        let (enc, ps) = tiny_encoder();
        let (sits, mts) = random_sample(&enc, 2);
        let mut mask = TemporalMask::all_ones(6);
        mask.keep[3] = 0;
        let frame = enc.cfg.h * enc.cfg.w * enc.cfg.b;
        let mut sits2 = sits.clone();
        for v in sits2[3 * frame..4 * frame].iter_mut() {
            *v += 10.0;
        }
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &ps);
        let ones = TemporalMask::all_ones(6);
        let (za, _) = make_views(&enc, &mut g, &b, &sits, &mts, &mask, &ones).unwrap();
        let (za2, _) = make_views(&enc, &mut g, &b, &sits2, &mts, &mask, &ones).unwrap();
        assert_eq!(g.data(za), g.data(za2));
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let (enc, ps) = tiny_encoder();
        let (sits, mts) = random_sample(&enc, 3);
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &ps);
        let short = TemporalMask::all_ones(5);
        let ones = TemporalMask::all_ones(6);
        assert!(make_views(&enc, &mut g, &b, &sits, &mts, &short, &ones).is_err());
    }

    #[test]
    fn shared_mask_zeroes_both_modalities() {
        let mut mask = TemporalMask::all_ones(4);
        mask.keep[1] = 0;
        let sits: Vec<f64> = (0..4 * 6).map(|i| i as f64 + 1.0).collect();
        let mts: Vec<f64> = (0..4 * 3).map(|i| i as f64 + 1.0).collect();
        let (s, m) = apply_mask(&sits, &mts, 4, &mask).unwrap();
        assert!(s[6..12].iter().all(|&v| v == 0.0));
        assert!(m[3..6].iter().all(|&v| v == 0.0));
        assert_eq!(&s[..6], &sits[..6]);
        assert_eq!(&m[..3], &mts[..3]);
    }

    #[test]
    fn pooling_rules() {
        let mut g = Graph::new();
        let z = g.leaf(vec![3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        let p = pool_representation(&mut g, z);
        assert_eq!(g.data(p), &[0.5, -1.0]);
        let z2 = g.leaf(vec![2, 2], vec![1.0, 3.0, 3.0, 1.0]);
        let p2 = pool_representation(&mut g, z2);
        assert_eq!(g.data(p2), &[2.0, 2.0]);
        // row permutation invariance
        let z3 = g.leaf(vec![3, 2], vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0]);
        let z4 = g.leaf(vec![3, 2], vec![3.0, 4.0, 1.0, 2.0, 5.0, 6.0]);
        let p3 = pool_representation(&mut g, z3);
        let p4 = pool_representation(&mut g, z4);
        assert_eq!(g.data(p3), g.data(p4));
    }

    #[test]
    fn tca_uniform_similarities_give_ln4() {
        let mut g = Graph::new();
        let v: Vec<Var> = (0..4).map(|_| g.leaf(vec![3], vec![1.0, 2.0, 3.0])).collect();
        let batch = ContrastiveBatch {
            anchors: v.clone(),
            positives: v,
            temperature: 0.07,
        };
        let loss = tca_loss(&mut g, &batch).unwrap();
        assert!((g.data(loss)[0] - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tca_perfect_separation_vanishes() {
        // positive aligned, both negatives anti-aligned, tau = 0.07
        let mut g = Graph::new();
        let a = g.leaf(vec![2], vec![1.0, 0.0]);
        let b = g.leaf(vec![2], vec![0.0, 1.0]);
        let na = g.leaf(vec![2], vec![-1.0, 0.0]);
        let nb = g.leaf(vec![2], vec![0.0, -1.0]);
        let batch = ContrastiveBatch {
            anchors: vec![a, b, na, nb],
            positives: vec![a, b, na, nb],
            temperature: 0.07,
        };
        let loss = tca_loss(&mut g, &batch).unwrap();
        // worst-case off-diagonal sim is 0, margin exp(-1/tau) per negative
        assert!(g.data(loss)[0] < 1e-5, "loss {}", g.data(loss)[0]);
        // two-sample anti-aligned case is sharper
        let mut g2 = Graph::new();
        let a2 = g2.leaf(vec![2], vec![1.0, 0.0]);
        let b2 = g2.leaf(vec![2], vec![-1.0, 0.0]);
        let batch2 = ContrastiveBatch {
            anchors: vec![a2, b2],
            positives: vec![a2, b2],
            temperature: 0.07,
        };
        let loss2 = tca_loss(&mut g2, &batch2).unwrap();
        assert!(g2.data(loss2)[0] < 1e-10, "loss {}", g2.data(loss2)[0]);
    }

    #[test]
    fn tca_large_temperature_limit() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vars: Vec<Var> = (0..5)
            .map(|_| {
                let d: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
                g.leaf(vec![3], d)
            })
            .collect();
        let batch = ContrastiveBatch {
            anchors: vars.clone(),
            positives: vars,
            temperature: 1e6,
        };
        let loss = tca_loss(&mut g, &batch).unwrap();
        // K = 4 negatives: flattened similarities give ln(K + 1)
        assert!((g.data(loss)[0] - 5.0_f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn tca_scale_invariance_and_nonnegativity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        let mut anchors_scaled = Vec::new();
        let mut positives_scaled = Vec::new();
        for _ in 0..3 {
            let a: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
            let p: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
            anchors.push(g.leaf(vec![4], a.clone()));
            positives.push(g.leaf(vec![4], p.clone()));
            anchors_scaled.push(g.leaf(vec![4], a.iter().map(|v| v * 13.0).collect()));
            positives_scaled.push(g.leaf(vec![4], p.iter().map(|v| v * 13.0).collect()));
        }
        let l1 = tca_loss(&mut g, &ContrastiveBatch { anchors, positives, temperature: 0.07 }).unwrap();
        let l2 = tca_loss(
            &mut g,
            &ContrastiveBatch {
                anchors: anchors_scaled,
                positives: positives_scaled,
                temperature: 0.07,
            },
        )
        .unwrap();
        assert!((g.data(l1)[0] - g.data(l2)[0]).abs() < 1e-9);
        assert!(g.data(l1)[0] >= 0.0);
    }

    #[test]
    fn tca_validation() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2], vec![1.0, 0.0]);
        let solo = ContrastiveBatch { anchors: vec![a], positives: vec![a], temperature: 0.07 };
        assert!(tca_loss(&mut g, &solo).is_err());
        let pair = ContrastiveBatch {
            anchors: vec![a, a],
            positives: vec![a, a],
            temperature: 0.0,
        };
        assert!(tca_loss(&mut g, &pair).is_err());
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        use crate::numerics::grad_check;
        let (enc, mut ps) = tiny_encoder();
        let samples: Vec<(Vec<f64>, Vec<f64>)> =
            (0..2).map(|i| random_sample(&enc, 20 + i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let masks: Vec<(TemporalMask, TemporalMask)> = (0..2)
            .map(|_| {
                (
                    sample_temporal_mask(6, 0.3, &mut rng).unwrap(),
                    sample_temporal_mask(6, 0.3, &mut rng).unwrap(),
                )
            })
            .collect();
        let report = grad_check(&mut ps, 1e-4, 1e-3, |ps| {
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, ps);
            let mut anchors = Vec::new();
            let mut positives = Vec::new();
            for ((sits, mts), (ma, mb)) in samples.iter().zip(&masks) {
                let (za, zb) = make_views(&enc, &mut g, &b, sits, mts, ma, mb).unwrap();
                anchors.push(pool_representation(&mut g, za));
                positives.push(pool_representation(&mut g, zb));
            }
            let batch = ContrastiveBatch { anchors, positives, temperature: 0.07 };
            let loss = tca_loss(&mut g, &batch).unwrap();
            let gs = g.backward(loss);
            (g.data(loss)[0], Some(b.grads(ps, &gs)))
        })
        .unwrap();
        assert!(report.pass, "{}", report.summary());
    }
}
