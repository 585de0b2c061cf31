//! Synthetic multi-crop county-year samples with a known analytic yield
//! process, plus the on-disk dataset layout (`manifest.json` + `.pyt`
//! tensors per sample and modality).

pub mod ols;
pub mod pyt;

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::parallel_map;
use pyt::{read_pyt, write_pyt, F32Tensor};

pub const MANIFEST_VERSION: u32 = 1;

/// Logistic rates of the double-logistic greenness curve.
pub const PHENOLOGY_RATE_UP: f64 = 1.2;
pub const PHENOLOGY_RATE_DOWN: f64 = 1.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CropSpec {
    pub crop_id: usize,
    pub name: String,
    /// Start-of-season timestep (inclusive).
    pub sos: usize,
    /// End-of-season timestep (inclusive).
    pub eos: usize,
    /// Log-yield sensitivity to seasonal mean temperature.
    pub alpha: f64,
    /// Sensitivity to seasonal temperature standard deviation.
    pub beta: f64,
    /// Sensitivity to seasonal mean precipitation.
    pub gamma: f64,
    pub base_yield: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub b: usize,
    pub n_d: usize,
    pub m: usize,
    pub c: usize,
}

/// Generation parameters. Defaults are the desk scale:
/// T=24, H=W=32, B=4, N_d=7, M=3, C=4, 50 counties, 2 train + 1 test year.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub b: usize,
    pub n_d: usize,
    pub m: usize,
    pub n_counties: usize,
    pub train_years: Vec<i32>,
    pub test_years: Vec<i32>,
    pub crops: Vec<CropSpec>,

    // Weather process: seasonal sinusoid + per-county-year offset + daily noise.
    pub temp_base: f64,
    pub temp_amp: f64,
    pub temp_phase: f64,
    pub county_temp_sd: f64,
    pub daily_temp_sd: f64,
    pub precip_base: f64,
    pub precip_amp: f64,
    pub precip_phase: f64,
    pub county_precip_sd: f64,
    pub daily_precip_sd: f64,
    pub humid_base: f64,
    pub humid_amp: f64,
    pub humid_phase: f64,
    pub county_humid_sd: f64,
    pub daily_humid_sd: f64,

    /// Log-sd of the per-county-year volatility multiplier on daily noise.
    pub vol_log_sd: f64,
    /// Counties with id divisible by this get amplified noise (0 disables).
    pub high_noise_every: usize,
    pub high_noise_factor: f64,

    /// Log-yield noise sd (scaled by the volatility multiplier).
    pub yield_noise_sd: f64,

    // Imagery: per-band reflectance base/gain on the greenness curve.
    pub band_base: Vec<f64>,
    pub band_gain: Vec<f64>,
    pub pixel_noise_sd: f64,
    /// Log-sd of the per-sample greenness amplitude noise.
    pub amp_log_sd: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            t: 24,
            h: 32,
            w: 32,
            b: 4,
            n_d: 7,
            m: 3,
            n_counties: 50,
            train_years: vec![2020, 2021],
            test_years: vec![2022],
            crops: default_crops(),
            temp_base: 15.0,
            temp_amp: 10.0,
            temp_phase: 0.25,
            county_temp_sd: 2.0,
            daily_temp_sd: 2.5,
            precip_base: 3.0,
            precip_amp: 1.5,
            precip_phase: 0.45,
            county_precip_sd: 0.6,
            daily_precip_sd: 1.0,
            humid_base: 60.0,
            humid_amp: 15.0,
            humid_phase: 0.30,
            county_humid_sd: 5.0,
            daily_humid_sd: 6.0,
            vol_log_sd: 0.4,
            high_noise_every: 5,
            high_noise_factor: 2.0,
            yield_noise_sd: 0.06,
            band_base: vec![0.08, 0.12, 0.10, 0.30],
            band_gain: vec![0.15, 0.25, -0.05, 0.45],
            pixel_noise_sd: 0.05,
            amp_log_sd: 0.08,
        }
    }
}

/// The winter-wheat analog keeps a full-cycle window starting at t=0; wheat
/// and corn respond to mean temperature with opposite signs.
pub fn default_crops() -> Vec<CropSpec> {
    vec![
        CropSpec {
            crop_id: 0,
            name: "winter_wheat".into(),
            sos: 0,
            eos: 14,
            alpha: -0.30,
            beta: 0.10,
            gamma: 0.15,
            base_yield: 48.0,
        },
        CropSpec {
            crop_id: 1,
            name: "corn".into(),
            sos: 6,
            eos: 20,
            alpha: 0.28,
            beta: -0.10,
            gamma: 0.15,
            base_yield: 175.0,
        },
        CropSpec {
            crop_id: 2,
            name: "soybeans".into(),
            sos: 8,
            eos: 22,
            alpha: 0.22,
            beta: 0.08,
            gamma: 0.12,
            base_yield: 52.0,
        },
        CropSpec {
            crop_id: 3,
            name: "cotton".into(),
            sos: 5,
            eos: 19,
            alpha: -0.24,
            beta: -0.12,
            gamma: -0.10,
            base_yield: 820.0,
        },
    ]
}

impl GenConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            t: self.t,
            h: self.h,
            w: self.w,
            b: self.b,
            n_d: self.n_d,
            m: self.m,
            c: self.crops.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("t", self.t),
            ("h", self.h),
            ("w", self.w),
            ("b", self.b),
            ("n_d", self.n_d),
            ("m", self.m),
            ("n_counties", self.n_counties),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("gen.{field} must be positive")));
            }
        }
        if self.m != 3 {
            return Err(Error::Config("generator defines exactly 3 weather variables".into()));
        }
        if self.band_base.len() != self.b || self.band_gain.len() != self.b {
            return Err(Error::Config("band_base/band_gain must have length B".into()));
        }
        if self.crops.is_empty() {
            return Err(Error::Config("at least one crop required".into()));
        }
        for c in &self.crops {
            if !(c.sos < c.eos && c.eos <= self.t) {
                return Err(Error::Config(format!(
                    "crop {}: need 0 <= sos < eos <= T, got [{}, {}]",
                    c.name, c.sos, c.eos
                )));
            }
            if c.base_yield <= 0.0 {
                return Err(Error::Config(format!("crop {}: base_yield must be > 0", c.name)));
            }
        }
        if self.crops.len() > 1 {
            let has_opposite = self.crops.iter().any(|a| {
                self.crops.iter().any(|b| a.alpha * b.alpha < 0.0)
            });
            if !has_opposite {
                return Err(Error::Config(
                    "crop set must contain a pair with opposite-signed alpha".into(),
                ));
            }
        }
        if self.train_years.is_empty() {
            return Err(Error::Config("at least one train year required".into()));
        }
        Ok(())
    }

    /// Inclusive growing-season step range of a crop, clamped into [0, T).
    pub fn season_steps(&self, spec: &CropSpec) -> (usize, usize) {
        (spec.sos, spec.eos.min(self.t - 1))
    }
}

// ── manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub county_id: usize,
    pub year: i32,
    pub crop_id: usize,
    pub yield_true: f64,
    pub sits_file: String,
    pub mts_file: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub dims: Dims,
    pub crops: Vec<CropSpec>,
    pub samples: Vec<SampleRecord>,
    /// Generator parameters the dataset was produced from, kept for
    /// oracle recomputation of the ground-truth covariates.
    pub generator: Option<GenConfig>,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub rec: SampleRecord,
    /// T×H×W×B reflectances.
    pub sits: F32Tensor,
    /// T×N_d×M weather records.
    pub mts: F32Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].rec.split == Split::Train)
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].rec.split == Split::Test)
            .collect()
    }

    pub fn crop(&self, crop_id: usize) -> Result<&CropSpec> {
        self.manifest
            .crops
            .iter()
            .find(|c| c.crop_id == crop_id)
            .ok_or_else(|| Error::Lookup(format!("unknown crop id {crop_id}")))
    }
}

// ── deterministic stream derivation ─────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, tag: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed ^ tag.wrapping_mul(0xd6e8feb86659fd93));
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    ChaCha8Rng::seed_from_u64(s)
}

const TAG_WEATHER: u64 = 1;
const TAG_SAMPLE: u64 = 2;

// ── analytic pieces ─────────────────────────────────────────────────

/// Double-logistic greenness curve, clipped to [0, amplitude]; near zero
/// outside the [sos, eos] window with a single interior maximum.
pub fn phenology_curve(spec: &CropSpec, t: usize, amplitude: f64) -> Result<f64> {
    if amplitude <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "phenology_curve: amplitude {amplitude} must be positive"
        )));
    }
    let tf = t as f64;
    let up = 1.0 / (1.0 + (-PHENOLOGY_RATE_UP * (tf - spec.sos as f64 - 2.0)).exp());
    let down = 1.0 / (1.0 + (-PHENOLOGY_RATE_DOWN * (tf - spec.eos as f64 + 2.0)).exp());
    Ok((amplitude * (up - down)).clamp(0.0, amplitude))
}

/// Ground-truth yield process: multiplicative in standardized covariates,
/// strictly positive by construction.
pub fn true_yield(
    spec: &CropSpec,
    z_temp: f64,
    z_std: f64,
    z_precip: f64,
    noise: f64,
) -> f64 {
    spec.base_yield * (spec.alpha * z_temp + spec.beta * z_std + spec.gamma * z_precip + noise).exp()
}

/// Standardized growing-season weather covariates of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariates {
    pub z_temp: f64,
    pub z_std: f64,
    pub z_precip: f64,
}

fn seasonal(base: f64, amp: f64, phase: f64, frac: f64) -> f64 {
    base + amp * (2.0 * std::f64::consts::PI * (frac - phase)).sin()
}

impl GenConfig {
    fn day_frac(&self, t: usize, day: usize) -> f64 {
        (t * self.n_d + day) as f64 / (self.t * self.n_d) as f64
    }

    /// Covariates recomputed from raw weather data with the generator's
    /// population standardization constants. Used both when generating and
    /// by the linear oracle.
    pub fn covariates(&self, spec: &CropSpec, mts: &[f32]) -> Covariates {
        let (s0, s1) = self.season_steps(spec);
        let n = ((s1 - s0 + 1) * self.n_d) as f64;
        let mut sum_t = 0.0;
        let mut sum_p = 0.0;
        let mut resid = Vec::with_capacity((s1 - s0 + 1) * self.n_d);
        let mut sin_t = 0.0;
        let mut sin_p = 0.0;
        for t in s0..=s1 {
            for day in 0..self.n_d {
                let idx = (t * self.n_d + day) * self.m;
                let frac = self.day_frac(t, day);
                let temp = mts[idx] as f64;
                let precip = mts[idx + 1] as f64;
                sum_t += temp;
                sum_p += precip;
                let season_t = seasonal(self.temp_base, self.temp_amp, self.temp_phase, frac);
                sin_t += season_t;
                sin_p += seasonal(self.precip_base, self.precip_amp, self.precip_phase, frac);
                resid.push(temp - season_t);
            }
        }
        let mean_t = sum_t / n;
        let mean_p = sum_p / n;
        let expect_t = sin_t / n;
        let expect_p = sin_p / n;
        let sd_mean_t = (self.county_temp_sd.powi(2) + self.daily_temp_sd.powi(2) / n).sqrt();
        let sd_mean_p = (self.county_precip_sd.powi(2) + self.daily_precip_sd.powi(2) / n).sqrt();

        // Temperature volatility: std of the de-seasonalized series; the
        // county offset drops out with the window mean.
        let rm = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>() / n;
        let std_t = var.sqrt();
        // Population moments of v = exp(vol_log_sd · ξ).
        let mv = (self.vol_log_sd.powi(2) / 2.0).exp();
        let sv = mv * ((self.vol_log_sd.powi(2)).exp() - 1.0).sqrt();
        let z_std = (std_t - self.daily_temp_sd * mv) / (self.daily_temp_sd * sv).max(1e-9);

        Covariates {
            z_temp: (mean_t - expect_t) / sd_mean_t,
            z_std,
            z_precip: (mean_p - expect_p) / sd_mean_p,
        }
    }
}

// ── generation ──────────────────────────────────────────────────────

struct CountyYearWeather {
    mts: F32Tensor,
    volatility: f64,
}

fn gen_weather(cfg: &GenConfig, seed: u64, county: usize, year: i32) -> CountyYearWeather {
    let mut rng = stream(seed, TAG_WEATHER, &[county as u64, year as u64]);
    let norm = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let off_t = norm(&mut rng) * cfg.county_temp_sd;
    let off_p = norm(&mut rng) * cfg.county_precip_sd;
    let off_h = norm(&mut rng) * cfg.county_humid_sd;
    let mut vol = (cfg.vol_log_sd * norm(&mut rng)).exp();
    if cfg.high_noise_every > 0 && county % cfg.high_noise_every == 0 {
        vol *= cfg.high_noise_factor;
    }
    let mut data = Vec::with_capacity(cfg.t * cfg.n_d * cfg.m);
    for t in 0..cfg.t {
        for day in 0..cfg.n_d {
            let frac = cfg.day_frac(t, day);
            let temp = seasonal(cfg.temp_base, cfg.temp_amp, cfg.temp_phase, frac)
                + off_t
                + vol * cfg.daily_temp_sd * norm(&mut rng);
            let precip = seasonal(cfg.precip_base, cfg.precip_amp, cfg.precip_phase, frac)
                + off_p
                + vol * cfg.daily_precip_sd * norm(&mut rng);
            let humid = seasonal(cfg.humid_base, cfg.humid_amp, cfg.humid_phase, frac)
                + off_h
                + vol * cfg.daily_humid_sd * norm(&mut rng);
            data.push(temp as f32);
            data.push(precip as f32);
            data.push(humid as f32);
        }
    }
    CountyYearWeather {
        mts: F32Tensor::new(vec![cfg.t, cfg.n_d, cfg.m], data).expect("weather dims"),
        volatility: vol,
    }
}

fn gen_sample(
    cfg: &GenConfig,
    seed: u64,
    county: usize,
    year: i32,
    spec: &CropSpec,
    weather: &CountyYearWeather,
) -> (F32Tensor, f64) {
    let mut rng = stream(
        seed,
        TAG_SAMPLE,
        &[county as u64, year as u64, spec.crop_id as u64],
    );
    let norm = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let cov = cfg.covariates(spec, &weather.mts.data);
    let noise = cfg.yield_noise_sd * weather.volatility * norm(&mut rng);
    let y = true_yield(spec, cov.z_temp, cov.z_std, cov.z_precip, noise);

    // Greenness amplitude tracks relative yield with multiplicative noise.
    let amp = (y / spec.base_yield) * (cfg.amp_log_sd * norm(&mut rng)).exp();
    let mut curve = vec![0.0; cfg.t];
    for (t, c) in curve.iter_mut().enumerate() {
        *c = phenology_curve(spec, t, amp).expect("amp > 0");
    }

    let mut data = Vec::with_capacity(cfg.t * cfg.h * cfg.w * cfg.b);
    for &cv in &curve {
        for _ in 0..cfg.h * cfg.w {
            for b in 0..cfg.b {
                let v = cfg.band_base[b]
                    + cfg.band_gain[b] * cv
                    + cfg.pixel_noise_sd * norm(&mut rng);
                data.push(v as f32);
            }
        }
    }
    (
        F32Tensor::new(vec![cfg.t, cfg.h, cfg.w, cfg.b], data).expect("sits dims"),
        y,
    )
}

/// Generate the full dataset into `out_dir` (created if missing) and return
/// the loaded dataset. Deterministic in (config, seed).
pub fn generate_dataset(cfg: &GenConfig, seed: u64, out_dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut weather: HashMap<(usize, i32), CountyYearWeather> = HashMap::new();
    let years: Vec<i32> = cfg
        .train_years
        .iter()
        .chain(cfg.test_years.iter())
        .cloned()
        .collect();
    for &year in &years {
        for county in 0..cfg.n_counties {
            weather.insert((county, year), gen_weather(cfg, seed, county, year));
        }
    }

    struct Job<'a> {
        county: usize,
        year: i32,
        spec: &'a CropSpec,
        split: Split,
    }
    let mut jobs = Vec::new();
    for &year in &years {
        let split = if cfg.train_years.contains(&year) { Split::Train } else { Split::Test };
        for county in 0..cfg.n_counties {
            for spec in &cfg.crops {
                jobs.push(Job { county, year, spec, split });
            }
        }
    }

    let results = parallel_map(&jobs, |job| {
        let w = &weather[&(job.county, job.year)];
        let (sits, y) = gen_sample(cfg, seed, job.county, job.year, job.spec, w);
        let id = format!("c{:03}_y{}_{}", job.county, job.year, job.spec.name);
        let sits_file = format!("{id}_sits.pyt");
        let mts_file = format!("{id}_mts.pyt");
        let rec = SampleRecord {
            id,
            county_id: job.county,
            year: job.year,
            crop_id: job.spec.crop_id,
            yield_true: y,
            sits_file: sits_file.clone(),
            mts_file: mts_file.clone(),
            split: job.split,
        };
        let sits_res = write_pyt(&out_dir.join(&sits_file), &sits);
        let mts_res = write_pyt(&out_dir.join(&mts_file), &w.mts);
        (rec, sits, w.mts.clone(), sits_res.and(mts_res))
    });

    let mut samples = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for (rec, sits, mts, io) in results {
        io?;
        records.push(rec.clone());
        samples.push(LoadedSample { rec, sits, mts });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dims: cfg.dims(),
        crops: cfg.crops.clone(),
        samples: records,
        generator: Some(cfg.clone()),
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    Ok(Dataset { manifest, samples })
}

/// Read a dataset directory, validating every tensor against the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let d = manifest.dims;
    let recs = manifest.samples.clone();
    let loaded = parallel_map(&recs, |rec| -> Result<LoadedSample> {
        let sits = read_pyt(&dir.join(&rec.sits_file))?;
        let mts = read_pyt(&dir.join(&rec.mts_file))?;
        if sits.dims != [d.t, d.h, d.w, d.b] {
            return Err(Error::format(&rec.sits_file, format!("dims {:?} disagree with manifest", sits.dims)));
        }
        if mts.dims != [d.t, d.n_d, d.m] {
            return Err(Error::format(&rec.mts_file, format!("dims {:?} disagree with manifest", mts.dims)));
        }
        Ok(LoadedSample { rec: rec.clone(), sits, mts })
    });
    let samples = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

/// Write an in-memory dataset to a directory; `read_dataset` round-trips it
/// bit-exactly.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for s in &ds.samples {
        write_pyt(&dir.join(&s.rec.sits_file), &s.sits)?;
        write_pyt(&dir.join(&s.rec.mts_file), &s.mts)?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&ds.manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}
