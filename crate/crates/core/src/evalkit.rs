//! Evaluation: error metrics, season-prefix (real-time) curves,
//! weather-volatility cohort splits, per-crop sensitivity probing, and
//! report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::trainer::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub rmse: f64,
    /// None when the targets are constant (SST = 0).
    pub r2: Option<f64>,
    /// None when either series is constant.
    pub corr: Option<f64>,
    pub n: usize,
}

pub fn compute_metrics(predictions: &[f64], targets: &[f64]) -> Result<MetricTriple> {
    let n = predictions.len();
    if n != targets.len() || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "compute_metrics: {} predictions vs {} targets (need equal lengths >= 2)",
            n,
            targets.len()
        )));
    }
    if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compute_metrics: non-finite input".into()));
    }
    let nf = n as f64;
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    let rmse = (sse / nf).sqrt();
    let mean_y = targets.iter().sum::<f64>() / nf;
    let sst: f64 = targets.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);
    let mean_p = predictions.iter().sum::<f64>() / nf;
    let var_p: f64 = predictions.iter().map(|p| (p - mean_p) * (p - mean_p)).sum();
    let corr = if sst > 0.0 && var_p > 0.0 {
        let cov: f64 = predictions
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - mean_p) * (y - mean_y))
            .sum();
        Some((cov / (var_p * sst).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    };
    Ok(MetricTriple { rmse, r2, corr, n })
}

/// Model predictions over full growing-season windows for the given
/// sample indices, paired with targets.
pub fn predict_samples(
    model: &Model,
    ds: &Dataset,
    idxs: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(idxs.len());
    let mut targets = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let s = &ds.samples[i];
        let crop = ds.crop(s.rec.crop_id)?;
        preds.push(model.predict(
            &s.sits.to_f64(),
            &s.mts.to_f64(),
            s.rec.crop_id,
            crop.sos,
            crop.eos,
        )?);
        targets.push(s.rec.yield_true);
    }
    Ok((preds, targets))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealtimeCurve {
    pub crop_id: usize,
    pub crop: String,
    /// (prefix end timestep, metrics over the crop's test samples).
    pub points: Vec<(usize, MetricTriple)>,
}

/// Progressive evaluation: for each crop and each cutoff t in
/// [sos, eos], predict from the window [sos, t] only. The t = eos point
/// reproduces standard evaluation exactly because it runs the same
/// masking path.
pub fn realtime_eval(model: &Model, ds: &Dataset, idxs: &[usize]) -> Result<Vec<RealtimeCurve>> {
    let mut curves = Vec::new();
    for crop in &ds.manifest.crops {
        let crop_idxs: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| ds.samples[i].rec.crop_id == crop.crop_id)
            .collect();
        if crop_idxs.len() < 2 {
            continue;
        }
        let targets: Vec<f64> =
            crop_idxs.iter().map(|&i| ds.samples[i].rec.yield_true).collect();
        let mut points = Vec::with_capacity(crop.eos - crop.sos + 1);
        for cutoff in crop.sos..=crop.eos {
            let mut preds = Vec::with_capacity(crop_idxs.len());
            for &i in &crop_idxs {
                let s = &ds.samples[i];
                preds.push(model.predict(
                    &s.sits.to_f64(),
                    &s.mts.to_f64(),
                    crop.crop_id,
                    crop.sos,
                    cutoff,
                )?);
            }
            points.push((cutoff, compute_metrics(&preds, &targets)?));
        }
        curves.push(RealtimeCurve { crop_id: crop.crop_id, crop: crop.name.clone(), points });
    }
    Ok(curves)
}

/// Rank samples by growing-season weather volatility and cut at the
/// quantile: bottom cohort is stable, top is volatile. Ties resolve by
/// sample id, so the partition is total and deterministic.
pub fn volatility_split(
    ds: &Dataset,
    idxs: &[usize],
    quantile: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&quantile) || quantile == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "quantile must be in (0, 1), got {quantile}"
        )));
    }
    let d = &ds.manifest.dims;
    let mut ranked: Vec<(f64, &str, usize)> = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let s = &ds.samples[i];
        let crop = ds.crop(s.rec.crop_id)?;
        let (s0, s1) = (crop.sos, crop.eos.min(d.t - 1));
        let mut cv_sum = 0.0;
        let mut cv_n = 0usize;
        for m in 0..d.m {
            let mut vals = Vec::with_capacity((s1 - s0 + 1) * d.n_d);
            for t in s0..=s1 {
                for day in 0..d.n_d {
                    vals.push(s.mts.data[(t * d.n_d + day) * d.m + m] as f64);
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            if mean.abs() < 1e-9 {
                eprintln!(
                    "warning: variable {m} has near-zero mean for sample {}; excluded from CV",
                    s.rec.id
                );
                continue;
            }
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            cv_sum += var.sqrt() / mean.abs();
            cv_n += 1;
        }
        if cv_n == 0 {
            return Err(Error::DegenerateInput(format!(
                "sample {} has no usable meteorological variable for CV",
                s.rec.id
            )));
        }
        ranked.push((cv_sum / cv_n as f64, &s.rec.id, i));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let cut = (quantile * ranked.len() as f64).floor() as usize;
    let stable = ranked[..cut].iter().map(|r| r.2).collect();
    let volatile = ranked[cut..].iter().map(|r| r.2).collect();
    Ok((stable, volatile))
}

/// Per-crop first-order response of the prediction to a uniform shift
/// of one meteorological variable across all timesteps and days.
pub fn sensitivity_probe(
    model: &Model,
    ds: &Dataset,
    idxs: &[usize],
    variable: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    let d = &ds.manifest.dims;
    if variable >= d.m {
        return Err(Error::InvalidArgument(format!(
            "variable index {variable} outside 0..{}",
            d.m
        )));
    }
    if delta == 0.0 {
        return Err(Error::InvalidArgument("delta must be nonzero".into()));
    }
    let mut sums = vec![0.0; ds.manifest.crops.len()];
    let mut counts = vec![0usize; ds.manifest.crops.len()];
    for &i in idxs {
        let s = &ds.samples[i];
        let crop = ds.crop(s.rec.crop_id)?;
        let sits = s.sits.to_f64();
        let mts = s.mts.to_f64();
        let mut shifted = mts.clone();
        for (k, v) in shifted.iter_mut().enumerate() {
            if k % d.m == variable {
                *v += delta;
            }
        }
        let base = model.predict(&sits, &mts, s.rec.crop_id, crop.sos, crop.eos)?;
        let moved = model.predict(&sits, &shifted, s.rec.crop_id, crop.sos, crop.eos)?;
        sums[s.rec.crop_id] += (moved - base) / delta;
        counts[s.rec.crop_id] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}

/// One report row: a metric value for a crop within a cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub crop: String,
    pub cohort: String,
    pub metric: String,
    pub value: Option<f64>,
}

pub fn metric_rows(crop: &str, cohort: &str, m: &MetricTriple) -> Vec<ReportRow> {
    vec![
        ReportRow {
            crop: crop.into(),
            cohort: cohort.into(),
            metric: "rmse".into(),
            value: Some(m.rmse),
        },
        ReportRow { crop: crop.into(), cohort: cohort.into(), metric: "r2".into(), value: m.r2 },
        ReportRow {
            crop: crop.into(),
            cohort: cohort.into(),
            metric: "corr".into(),
            value: m.corr,
        },
        ReportRow {
            crop: crop.into(),
            cohort: cohort.into(),
            metric: "n".into(),
            value: Some(m.n as f64),
        },
    ]
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from("crop,cohort,metric,value\n");
    for r in rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.crop, r.cohort, r.metric, v));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_report_json<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenConfig};
    use crate::decoder::{Decoder, DecoderCfg};
    use crate::encoder::{Encoder, EncoderCfg};
    use crate::trainer::init_model;

    #[test]
    fn metrics_identity_and_hand_values() {
        let m = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.r2, Some(1.0));
        assert_eq!(m.corr, Some(1.0));
        let m = compute_metrics(&[2.0, 2.0], &[0.0, 2.0]).unwrap();
        assert!((m.rmse - 2.0_f64.sqrt()).abs() < 1e-12);
        // mean predictor has r2 = 0
        let y = [1.0, 5.0, 3.0, 7.0];
        let mean = 4.0;
        let m = compute_metrics(&[mean; 4], &y).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-12);
    }

    #[test]
    fn metrics_constant_targets_and_validation() {
        let m = compute_metrics(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert!(m.corr.is_none());
        assert!(m.r2.is_none());
        assert!(m.rmse > 0.0);
        assert!(compute_metrics(&[1.0], &[1.0]).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0]).is_err());
        assert!(compute_metrics(&[f64::NAN, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn metrics_permutation_invariant_and_bounded() {
        let p = [3.0, 1.0, 4.0, 1.5];
        let y = [2.5, 1.2, 3.8, 2.0];
        let a = compute_metrics(&p, &y).unwrap();
        let b = compute_metrics(&[4.0, 3.0, 1.5, 1.0], &[3.8, 2.5, 2.0, 1.2]).unwrap();
        assert!((a.rmse - b.rmse).abs() < 1e-12);
        assert!((a.r2.unwrap() - b.r2.unwrap()).abs() < 1e-12);
        assert!((a.corr.unwrap() - b.corr.unwrap()).abs() < 1e-12);
        assert!(a.r2.unwrap() <= 1.0);
        assert!(a.corr.unwrap().abs() <= 1.0);
    }

    fn tiny_setup() -> (GenConfig, Dataset, Model, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let defaults = GenConfig::default();
        let mut gc = GenConfig {
            t: 12,
            h: 8,
            w: 8,
            b: 2,
            n_d: 3,
            m: 3,
            n_counties: 10,
            train_years: vec![2020],
            test_years: vec![2021],
            crops: defaults.crops.into_iter().take(2).collect(),
            band_base: defaults.band_base[..2].to_vec(),
            band_gain: defaults.band_gain[..2].to_vec(),
            ..GenConfig::default()
        };
        for c in gc.crops.iter_mut() {
            c.sos = c.sos.min(8);
            c.eos = c.eos.min(11);
        }
        let ds = generate_dataset(&gc, 21, &dir.path().join("data")).unwrap();
        let enc = Encoder::new(EncoderCfg {
            t: gc.t,
            h: gc.h,
            w: gc.w,
            b: gc.b,
            n_d: gc.n_d,
            m: gc.m,
            d: 8,
            patch_size: 4,
            n_layers_img: 1,
            n_heads: 2,
            adapter_hidden: 8,
            mlp_ratio: 2,
            ..EncoderCfg::default()
        })
        .unwrap();
        let dec = Decoder::new(DecoderCfg {
            t: gc.t,
            d: 8,
            n_crops: gc.crops.len(),
            windows: vec![3, 6, 12],
            head_hidden: 8,
            ..DecoderCfg::default()
        })
        .unwrap();
        let model = init_model(enc, dec, 5);
        (gc, ds, model, dir)
    }

    #[test]
    fn realtime_full_prefix_matches_standard_eval() {
        let (_, ds, model, _dir) = tiny_setup();
        let idxs = ds.test_indices();
        let curves = realtime_eval(&model, &ds, &idxs).unwrap();
        assert!(!curves.is_empty());
        for curve in &curves {
            let crop = ds.crop(curve.crop_id).unwrap();
            assert_eq!(curve.points.len(), crop.eos - crop.sos + 1);
            // strictly increasing timesteps in [sos, eos]
            assert!(curve.points.windows(2).all(|w| w[1].0 == w[0].0 + 1));
            assert_eq!(curve.points[0].0, crop.sos);
            // last point equals the standard full-season evaluation
            let crop_idxs: Vec<usize> = idxs
                .iter()
                .copied()
                .filter(|&i| ds.samples[i].rec.crop_id == curve.crop_id)
                .collect();
            let (preds, targets) = predict_samples(&model, &ds, &crop_idxs).unwrap();
            let full = compute_metrics(&preds, &targets).unwrap();
            let last = curve.points.last().unwrap().1;
            assert_eq!(last.rmse, full.rmse);
            assert_eq!(last.r2, full.r2);
        }
    }

    #[test]
    fn volatility_split_partition_and_sizes() {
        let (_, ds, _, _dir) = tiny_setup();
        let idxs = ds.test_indices();
        let (stable, volatile) = volatility_split(&ds, &idxs, 0.7).unwrap();
        assert_eq!(stable.len(), (0.7 * idxs.len() as f64).floor() as usize);
        assert_eq!(stable.len() + volatile.len(), idxs.len());
        let mut all: Vec<usize> = stable.iter().chain(&volatile).copied().collect();
        all.sort_unstable();
        let mut expect = idxs.clone();
        expect.sort_unstable();
        assert_eq!(all, expect);
        assert!(volatility_split(&ds, &idxs, 0.0).is_err());
        assert!(volatility_split(&ds, &idxs, 1.0).is_err());
    }

    #[test]
    fn volatility_split_ranks_noisy_counties_volatile() {
        // Counties divisible by high_noise_every carry doubled daily noise.
        let (gc, ds, _, _dir) = tiny_setup();
        let idxs = ds.test_indices();
        let (_, volatile) = volatility_split(&ds, &idxs, 0.7).unwrap();
        let noisy: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| ds.samples[i].rec.county_id % gc.high_noise_every == 0)
            .collect();
        let captured = noisy.iter().filter(|i| volatile.contains(i)).count();
        assert!(
            captured * 2 >= noisy.len(),
            "only {captured} of {} noisy samples ranked volatile",
            noisy.len()
        );
    }

    #[test]
    fn sensitivity_zero_head_gives_zero() {
        let (_, ds, mut model, _dir) = tiny_setup();
        for name in ["dec.head.w1", "dec.head.b1", "dec.head.w2", "dec.head.b2"] {
            let idx = (0..model.dec_ps.len())
                .find(|&i| model.dec_ps.by_index(i).name == name)
                .unwrap();
            for v in model.dec_ps.by_index_mut(idx).value.data.iter_mut() {
                *v = 0.0;
            }
        }
        let idxs = ds.test_indices();
        let sens = sensitivity_probe(&model, &ds, &idxs[..4], 0, 0.5).unwrap();
        assert!(sens.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn sensitivity_sign_symmetry() {
        let (_, ds, model, _dir) = tiny_setup();
        let idxs = ds.test_indices();
        let up = sensitivity_probe(&model, &ds, &idxs[..6], 0, 0.2).unwrap();
        let down = sensitivity_probe(&model, &ds, &idxs[..6], 0, -0.2).unwrap();
        for (u, d) in up.iter().zip(&down) {
            if u.abs() > 1e-9 {
                let rel = (u - d).abs() / u.abs().max(d.abs());
                assert!(rel < 0.1, "asymmetric response: +{u} vs {d}");
            }
        }
        assert!(sensitivity_probe(&model, &ds, &idxs, 9, 0.1).is_err());
        assert!(sensitivity_probe(&model, &ds, &idxs, 0, 0.0).is_err());
    }

    #[test]
    fn report_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let m = MetricTriple { rmse: 1.5, r2: Some(0.9), corr: Some(0.95), n: 10 };
        let rows = metric_rows("corn", "all", &m);
        let csv_path = dir.path().join("report.csv");
        write_report_csv(&csv_path, &rows).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("crop,cohort,metric,value\n"));
        assert!(text.contains("corn,all,rmse,1.5"));
        let json_path = dir.path().join("report.json");
        write_report_json(&json_path, &rows).unwrap();
        let back: Vec<ReportRow> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back.len(), rows.len());
    }
}
