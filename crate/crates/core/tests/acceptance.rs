//! Acceptance gate: one test per release criterion, each ending in a
//! single pass/fail line. Criteria 7-11 share one trained pipeline on
//! the default desk-scale dataset, built lazily on first use.

use std::path::Path;
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use pheno_core::datagen::{generate_dataset, ols::OlsOracle, Dataset, GenConfig};
use pheno_core::decoder::{growing_season_mask, mse_log_loss, Decoder, DecoderCfg};
use pheno_core::encoder::{Encoder, EncoderCfg};
use pheno_core::evalkit::{
    compute_metrics, predict_samples, realtime_eval, sensitivity_probe, volatility_split,
    MetricTriple,
};
use pheno_core::numerics::{grad_check, BoundParams, Graph, ParamSet};
use pheno_core::pretrain::{
    make_views, pool_representation, sample_temporal_mask, tca_loss, ContrastiveBatch,
    TemporalMask,
};
use pheno_core::trainer::{
    run_finetune, run_pretrain, Checkpoint, FinetuneCfg, Model, PretrainCfg,
};
use pheno_core::util::sha256_hex;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {id:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

// ── criterion 1: exact trend/variation reconstruction ───────────────

#[test]
fn criterion_01_decomposition_identity() {
    let start = Instant::now();
    let cfg = DecoderCfg::default(); // T = 24, d = 64, windows {3, 6, 12}
    let dec = Decoder::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::new();
    dec.init_params(&mut ps, &mut rng);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let z_data: Vec<f64> = (0..cfg.t * cfg.d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &ps);
        let z = g.leaf(vec![cfg.t, cfg.d], z_data.clone());
        let d = dec.decompose(&mut g, &b, z);
        let sum = g.add(d.mu, d.nu);
        for (s, z0) in g.data(sum).iter().zip(&z_data) {
            worst = worst.max((s - z0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "decomposition-identity",
        worst < 1e-9 && secs < 5.0,
        &format!("max |mu+nu-Z| {worst:.3e} over 100 matrices in {secs:.2}s"),
    );
}

// ── criterion 2: end-to-end gradient oracle ─────────────────────────

fn grad_encoder_cfg() -> EncoderCfg {
    EncoderCfg {
        t: 8,
        h: 4,
        w: 4,
        b: 1,
        n_d: 2,
        m: 2,
        d: 16,
        patch_size: 4,
        n_layers_img: 1,
        n_heads: 2,
        adapter_hidden: 8,
        mlp_ratio: 1,
        met_shift: vec![0.0, 0.0],
        met_scale: vec![1.0, 1.0],
    }
}

fn grad_decoder_cfg() -> DecoderCfg {
    DecoderCfg {
        t: 8,
        d: 16,
        n_crops: 2,
        windows: vec![2, 4, 8],
        n_blocks: 1,
        head_hidden: 8,
        ..DecoderCfg::default()
    }
}

fn random_inputs(cfg: &EncoderCfg, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let sits = (0..cfg.t * cfg.h * cfg.w * cfg.b)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mts = (0..cfg.t * cfg.n_d * cfg.m)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    (sits, mts)
}

#[test]
fn criterion_02_gradient_oracle() {
    let start = Instant::now();
    let enc = Encoder::new(grad_encoder_cfg()).unwrap();
    let dec = Decoder::new(grad_decoder_cfg()).unwrap();
    let mut worst = 0.0_f64;

    // Path 1: encoder -> decoder -> log-space MSE, ten random instances.
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let mut ps = ParamSet::new();
        enc.init_params(&mut ps, &mut rng);
        dec.init_params(&mut ps, &mut rng);
        let (sits, mts) = random_inputs(&enc.cfg, &mut rng);
        let crop_id = rng.random_range(0..2usize);
        let target: f64 = rng.random_range(20.0..80.0);
        // Reverse-mode gradients are needed only at the baseline point;
        // the finite-difference evaluations skip the backward pass.
        let mut need_grads = true;
        let report = grad_check(&mut ps, 3e-4, 1e-3, |p| {
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, p);
            let z = enc.forward(&mut g, &b, &sits, &mts).z;
            let out = dec.forward(&mut g, &b, z, crop_id, None).unwrap();
            let diff = g.add_const(out.log_yield, -target.ln());
            let loss = g.sqr(diff);
            let loss = g.sum_all(loss);
            let grads = need_grads.then(|| {
                let gs = g.backward(loss);
                b.grads(p, &gs)
            });
            need_grads = false;
            (g.data(loss)[0], grads)
        })
        .unwrap();
        assert!(report.pass, "decoder path trial {trial}: {}", report.summary());
        worst = worst.max(report.max_rel_err);
    }

    // Path 2: encoder -> pooled views -> contrastive loss, ten instances.
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let mut ps = ParamSet::new();
        enc.init_params(&mut ps, &mut rng);
        let samples: Vec<(Vec<f64>, Vec<f64>)> =
            (0..2).map(|_| random_inputs(&enc.cfg, &mut rng)).collect();
        let masks: Vec<(TemporalMask, TemporalMask)> = (0..2)
            .map(|_| {
                (
                    sample_temporal_mask(8, 0.3, &mut rng).unwrap(),
                    sample_temporal_mask(8, 0.3, &mut rng).unwrap(),
                )
            })
            .collect();
        let mut need_grads = true;
        let report = grad_check(&mut ps, 1e-4, 1e-3, |p| {
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, p);
            let mut anchors = Vec::new();
            let mut positives = Vec::new();
            for ((sits, mts), (ma, mb)) in samples.iter().zip(&masks) {
                let (za, zb) = make_views(&enc, &mut g, &b, sits, mts, ma, mb).unwrap();
                anchors.push(pool_representation(&mut g, za));
                positives.push(pool_representation(&mut g, zb));
            }
            let batch = ContrastiveBatch { anchors, positives, temperature: 0.07 };
            let loss = tca_loss(&mut g, &batch).unwrap();
            let grads = need_grads.then(|| {
                let gs = g.backward(loss);
                b.grads(p, &gs)
            });
            need_grads = false;
            (g.data(loss)[0], grads)
        })
        .unwrap();
        assert!(report.pass, "contrastive path trial {trial}: {}", report.summary());
        worst = worst.max(report.max_rel_err);
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "gradient-oracle",
        secs < 120.0,
        &format!("20 end-to-end instances, max rel err {worst:.3e}, {secs:.1}s"),
    );
}

// ── criterion 3: closed-form loss values ────────────────────────────

#[test]
fn criterion_03_closed_form_losses() {
    // Four identical embeddings: all pairwise similarities equal, so each
    // softmax row is uniform over 4 entries (3 negatives) and the
    // contrastive loss is exactly ln 4.
    let mut g = Graph::new();
    let e: Vec<f64> = vec![0.3; 16];
    let anchors: Vec<_> = (0..4).map(|_| g.leaf(vec![1, 16], e.clone())).collect();
    let positives: Vec<_> = (0..4).map(|_| g.leaf(vec![1, 16], e.clone())).collect();
    let batch = ContrastiveBatch { anchors, positives, temperature: 0.07 };
    let loss = tca_loss(&mut g, &batch).unwrap();
    let tca_err = (g.data(loss)[0] - 4.0_f64.ln()).abs();

    let targets = [3.0, 47.0, 812.0];
    let preds: Vec<f64> = targets.iter().map(|y| std::f64::consts::E * y).collect();
    let mse_err = (mse_log_loss(&preds, &targets).unwrap() - 1.0).abs();

    verdict(
        3,
        "closed-form-losses",
        tca_err < 1e-9 && mse_err < 1e-12,
        &format!("|tca - ln 4| {tca_err:.2e}, |mse_log - 1| {mse_err:.2e}"),
    );
}

// ── criterion 4: attention row contracts under masking ──────────────

#[test]
fn criterion_04_attention_contracts() {
    let cfg = DecoderCfg::default();
    let dec = Decoder::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut ps = ParamSet::new();
    dec.init_params(&mut ps, &mut rng);
    let (sos, eos) = (5, 19);
    let mask = growing_season_mask(cfg.t, sos, eos).unwrap();

    let mut worst_sum = 0.0_f64;
    let mut worst_masked = 0.0_f64;
    for _ in 0..20 {
        let z_data: Vec<f64> = (0..cfg.t * cfg.d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &ps);
        let z = g.leaf(vec![cfg.t, cfg.d], z_data);
        let out = dec.forward(&mut g, &b, z, 1, Some(&mask)).unwrap();
        for a in &out.attn {
            let row = g.data(*a);
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            for (t, w) in row.iter().enumerate() {
                if t < sos || t > eos {
                    worst_masked = worst_masked.max(*w);
                }
            }
        }
        // Mixture weights are softmax rows too.
        let mix = g.data(out.decomp.mix_weights);
        for row in mix.chunks(cfg.windows.len()) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(
        4,
        "attention-contracts",
        worst_sum < 1e-9 && worst_masked < 1e-12,
        &format!("row-sum dev {worst_sum:.2e}, masked weight {worst_masked:.2e}"),
    );
}

// ── tiny pipeline shared by criteria 5 and 6 ────────────────────────

fn tiny_gen_cfg() -> GenConfig {
    let d = GenConfig::default();
    GenConfig {
        t: 12,
        h: 8,
        w: 8,
        b: 2,
        n_d: 3,
        n_counties: 6,
        train_years: vec![2020],
        test_years: vec![2021],
        band_base: d.band_base[..2].to_vec(),
        band_gain: d.band_gain[..2].to_vec(),
        crops: d
            .crops
            .into_iter()
            .take(2)
            .map(|mut c| {
                c.sos = c.sos.min(6);
                c.eos = c.eos.min(11);
                c
            })
            .collect(),
        ..d
    }
}

fn tiny_encoder_cfg() -> EncoderCfg {
    EncoderCfg {
        t: 12,
        h: 8,
        w: 8,
        b: 2,
        n_d: 3,
        d: 8,
        patch_size: 4,
        n_heads: 2,
        adapter_hidden: 8,
        mlp_ratio: 1,
        ..EncoderCfg::default()
    }
}

fn tiny_decoder_cfg() -> DecoderCfg {
    DecoderCfg {
        t: 12,
        d: 8,
        n_crops: 2,
        windows: vec![2, 4, 8],
        n_blocks: 1,
        head_hidden: 8,
        ..DecoderCfg::default()
    }
}

struct TinyRun {
    pretrain_ck: Checkpoint,
    finetune_ck: Checkpoint,
    report_bytes: Vec<u8>,
}

fn tiny_pipeline(dir: &Path, seed: u64) -> TinyRun {
    let ds = generate_dataset(&tiny_gen_cfg(), seed, &dir.join("data")).unwrap();
    let enc = Encoder::new(tiny_encoder_cfg()).unwrap();
    let dec = Decoder::new(tiny_decoder_cfg()).unwrap();
    let pre_cfg = PretrainCfg { epochs: 1, batch_size: 8, ..PretrainCfg::default() };
    let (pretrain_ck, _) = run_pretrain(&enc, &ds, &pre_cfg, seed, &dir.join("out")).unwrap();
    let ft_cfg = FinetuneCfg { epochs: 3, batch_size: 8, ..FinetuneCfg::default() };
    let out = run_finetune(enc, dec, &ds, &ft_cfg, seed, Some(&pretrain_ck), &dir.join("out"))
        .unwrap();
    let (preds, targets) = predict_samples(&out.model, &ds, &ds.test_indices()).unwrap();
    let metrics = compute_metrics(&preds, &targets).unwrap();
    TinyRun {
        pretrain_ck,
        finetune_ck: out.ckpt,
        report_bytes: serde_json::to_vec(&metrics).unwrap(),
    }
}

// ── criterion 5: encoder bit-frozen through stage II ────────────────

#[test]
fn criterion_05_freeze_contract() {
    let dir = TempDir::new().unwrap();
    let run = tiny_pipeline(dir.path(), 51);
    let frozen: Vec<_> = run
        .pretrain_ck
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("enc."))
        .collect();
    let after: Vec<_> = run
        .finetune_ck
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("enc."))
        .collect();
    let mut identical = frozen.len() == after.len() && !frozen.is_empty();
    for ((na, ta), (nb, tb)) in frozen.iter().zip(&after) {
        identical &= na == nb
            && ta.data.len() == tb.data.len()
            && ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    verdict(
        5,
        "freeze-contract",
        identical,
        &format!("{} encoder tensors bit-compared", frozen.len()),
    );
}

// ── criterion 6: bit-level determinism of the full pipeline ─────────

#[test]
fn criterion_06_determinism() {
    let da = TempDir::new().unwrap();
    let db = TempDir::new().unwrap();
    let a = tiny_pipeline(da.path(), 61);
    let b = tiny_pipeline(db.path(), 61);
    let ha = [
        sha256_hex(&a.pretrain_ck.encode()),
        sha256_hex(&a.finetune_ck.encode()),
        sha256_hex(&a.report_bytes),
    ];
    let hb = [
        sha256_hex(&b.pretrain_ck.encode()),
        sha256_hex(&b.finetune_ck.encode()),
        sha256_hex(&b.report_bytes),
    ];
    verdict(
        6,
        "determinism",
        ha == hb,
        &format!("pretrain/finetune/report hashes {}..", &ha[1][..12]),
    );
}

// ── shared trained pipeline for criteria 7-11 ───────────────────────

struct Pipeline {
    _dir: TempDir,
    ds: Dataset,
    model: Model,
    ablated: Model,
    ols: OlsOracle,
    train_secs: f64,
}

fn desk_pretrain_cfg() -> PretrainCfg {
    PretrainCfg { epochs: 1, ..PretrainCfg::default() }
}

fn desk_finetune_cfg() -> FinetuneCfg {
    FinetuneCfg { epochs: 200, patience: 40, base_lr: 6e-4, ..FinetuneCfg::default() }
}

static PIPELINE: Lazy<Pipeline> = Lazy::new(|| {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let gen = GenConfig::default(); // 4 crops, 50 counties, 2 train + 1 test year
    let ds = generate_dataset(&gen, 1, &dir.path().join("data")).unwrap();

    let enc_cfg = EncoderCfg::default();
    let dec_cfg = DecoderCfg { head_hidden: 160, ..DecoderCfg::default() };
    let enc = Encoder::new(enc_cfg.clone()).unwrap();
    let (pre_ck, _) =
        run_pretrain(&enc, &ds, &desk_pretrain_cfg(), 1, &dir.path().join("out")).unwrap();
    let out = run_finetune(
        Encoder::new(enc_cfg.clone()).unwrap(),
        Decoder::new(dec_cfg.clone()).unwrap(),
        &ds,
        &desk_finetune_cfg(),
        1,
        Some(&pre_ck),
        &dir.path().join("out"),
    )
    .unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    // Ablation: same data and pretrain checkpoint, but a decoder with a
    // shared query and no phenology bias.
    let abl_cfg = DecoderCfg { use_bank: false, use_phen_bias: false, ..dec_cfg };
    let abl = run_finetune(
        Encoder::new(enc_cfg).unwrap(),
        Decoder::new(abl_cfg).unwrap(),
        &ds,
        &desk_finetune_cfg(),
        1,
        Some(&pre_ck),
        &dir.path().join("abl"),
    )
    .unwrap();

    let ols = OlsOracle::fit(&ds).unwrap();
    Pipeline { _dir: dir, ds, model: out.model, ablated: abl.model, ols, train_secs }
});

fn crop_test_indices(ds: &Dataset, crop_id: usize) -> Vec<usize> {
    ds.test_indices()
        .into_iter()
        .filter(|&i| ds.samples[i].rec.crop_id == crop_id)
        .collect()
}

fn per_crop_metrics(model: &Model, ds: &Dataset) -> Vec<(String, MetricTriple)> {
    ds.manifest
        .crops
        .iter()
        .map(|crop| {
            let idxs = crop_test_indices(ds, crop.crop_id);
            let (preds, targets) = predict_samples(model, ds, &idxs).unwrap();
            (crop.name.clone(), compute_metrics(&preds, &targets).unwrap())
        })
        .collect()
}

// ── criterion 7: synthetic end-to-end quality and runtime ───────────

#[test]
fn criterion_07_synthetic_end_to_end() {
    let p = &*PIPELINE;
    let metrics = per_crop_metrics(&p.model, &p.ds);
    let mut pass = p.train_secs <= 1200.0;
    let mut detail = format!("train+eval {:.0}s", p.train_secs);
    for (crop, m) in &metrics {
        let spec = p.ds.manifest.crops.iter().find(|c| &c.name == crop).unwrap();
        let idxs = crop_test_indices(&p.ds, spec.crop_id);
        let (op, ot) = p.ols.predict_set(&p.ds, &idxs).unwrap();
        let ols_rmse = compute_metrics(&op, &ot).unwrap().rmse;
        let r2 = m.r2.unwrap_or(f64::NEG_INFINITY);
        let ok = r2 >= 0.8 && m.rmse <= 1.3 * ols_rmse;
        pass &= ok;
        detail.push_str(&format!(
            "; {crop} r2 {r2:.3} rmse {:.2} vs 1.3x ols {:.2}",
            m.rmse,
            1.3 * ols_rmse
        ));
    }
    verdict(7, "synthetic-end-to-end", pass, &detail);
}

// ── criterion 8: phenology bank + attention ablation direction ──────

#[test]
fn criterion_08_ablation_direction() {
    let p = &*PIPELINE;
    let full: f64 = per_crop_metrics(&p.model, &p.ds).iter().map(|(_, m)| m.rmse).sum::<f64>() / 4.0;
    let abl: f64 =
        per_crop_metrics(&p.ablated, &p.ds).iter().map(|(_, m)| m.rmse).sum::<f64>() / 4.0;
    verdict(
        8,
        "ablation-direction",
        full <= abl,
        &format!("mean rmse full {full:.3} <= ablated {abl:.3}"),
    );
}

// ── criterion 9: recovered temperature response signs ───────────────

#[test]
fn criterion_09_crop_response_recovery() {
    let p = &*PIPELINE;
    let sens = sensitivity_probe(&p.model, &p.ds, &p.ds.test_indices(), 0, 1.0).unwrap();
    let mut matches = 0;
    let mut detail = String::new();
    for (crop, s) in p.ds.manifest.crops.iter().zip(&sens) {
        let ok = s.signum() == crop.alpha.signum();
        matches += ok as usize;
        detail.push_str(&format!("{} {:+.3} (alpha {:+.2}); ", crop.name, s, crop.alpha));
    }
    verdict(
        9,
        "crop-response-recovery",
        matches >= 3,
        &format!("{matches}/4 signs match: {detail}"),
    );
}

// ── criterion 10: within-season curve improves by season end ────────

#[test]
fn criterion_10_realtime_curve() {
    let p = &*PIPELINE;
    let curves = realtime_eval(&p.model, &p.ds, &p.ds.test_indices()).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for c in &curves {
        let spec = p.ds.manifest.crops.iter().find(|s| s.crop_id == c.crop_id).unwrap();
        let early = &c.points.iter().find(|(t, _)| *t == spec.sos + 2).unwrap().1;
        let end = &c.points.last().unwrap().1;
        pass &= end.rmse <= early.rmse;
        detail.push_str(&format!("{} {:.2} -> {:.2}; ", c.crop, early.rmse, end.rmse));
    }
    verdict(10, "realtime-curve", pass, &detail);
}

// ── criterion 11: volatility cohorts and robustness ordering ────────

#[test]
fn criterion_11_robustness_split() {
    let p = &*PIPELINE;
    let test = p.ds.test_indices();
    let (stable, volatile) = volatility_split(&p.ds, &test, 0.7).unwrap();

    // Exhaustive and disjoint at the 70/30 cut.
    let mut all: Vec<usize> = stable.iter().chain(&volatile).copied().collect();
    all.sort_unstable();
    let mut expect = test.clone();
    expect.sort_unstable();
    let partition_ok = all == expect && stable.len() == (0.7 * test.len() as f64) as usize;

    let (sp, st) = predict_samples(&p.model, &p.ds, &stable).unwrap();
    let (vp, vt) = predict_samples(&p.model, &p.ds, &volatile).unwrap();
    let sm = compute_metrics(&sp, &st).unwrap();
    let vm = compute_metrics(&vp, &vt).unwrap();
    verdict(
        11,
        "robustness-split",
        partition_ok && vm.rmse >= sm.rmse,
        &format!(
            "stable n={} rmse {:.2}; volatile n={} rmse {:.2}",
            sm.n, sm.rmse, vm.n, vm.rmse
        ),
    );
}
