//! Command-line entry point: data generation, two-stage training,
//! evaluation experiments and the finite-difference gradient sweep.
//!
//! Every command resolves a JSON config (defaults if none given), applies
//! flag overrides, and writes `run.json` capturing the resolved config and
//! sha256 hashes of all artifacts it produced, so a run is reproducible
//! from that one file. `PHENO_THREADS` caps worker parallelism.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pheno_core::config::RunConfig;
use pheno_core::datagen::{generate_dataset, read_dataset, Dataset};
use pheno_core::decoder::DecoderCfg;
use pheno_core::encoder::{Encoder, EncoderCfg};
use pheno_core::evalkit::{
    compute_metrics, metric_rows, predict_samples, realtime_eval, sensitivity_probe,
    volatility_split, write_report_csv, write_report_json, MetricTriple, ReportRow,
};
use pheno_core::numerics::check_all_ops;
use pheno_core::trainer::{
    model_from_checkpoint, run_finetune, run_pretrain, Checkpoint, Model,
};
use pheno_core::decoder::Decoder;
use pheno_core::util::sha256_hex;
use pheno_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pheno", about = "Multi-crop yield prediction pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory (for gen-data: the dataset directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the crop roster to a comma-separated name list.
    #[arg(long, value_delimiter = ',')]
    crops: Option<Vec<String>>,
    /// Single-crop mode: one crop, per-crop phenology bank disabled.
    #[arg(long, conflicts_with = "crops")]
    single_crop: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known yield process.
    GenData(Common),
    /// Stage I: contrastive pretraining of the encoder.
    Pretrain(Common),
    /// Stage II: decoder fine-tuning on log-yield (encoder frozen).
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Train without a Stage-I checkpoint, from random initialization.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Standard test-split evaluation with per-crop metrics.
    Eval(Common),
    /// Progressive within-season evaluation over growing prefixes.
    Realtime(Common),
    /// Weather-volatility cohort split plus the sensitivity probe.
    Robustness(Common),
    /// Finite-difference gradient sweep over every differentiable op.
    Gradcheck(Common),
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &common.single_crop {
        cfg.single_crop(name)?;
    } else if let Some(names) = &common.crops {
        cfg.restrict_crops(names)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Record of one completed run: the resolved config plus content hashes
/// of every artifact the command wrote.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config: &'a RunConfig,
    artifacts: BTreeMap<String, String>,
}

fn write_run_json(dir: &Path, command: &str, cfg: &RunConfig, artifacts: &[PathBuf]) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for path in artifacts {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        hashes.insert(name, sha256_hex(&bytes));
    }
    write_report_json(
        &dir.join("run.json"),
        &RunRecord { command, config: cfg, artifacts: hashes },
    )
}

/// Model dimensions come from the dataset manifest so training and
/// evaluation always match the data actually on disk.
fn encoder_cfg_for(ds: &Dataset, cfg: &RunConfig) -> EncoderCfg {
    let d = &ds.manifest.dims;
    EncoderCfg {
        t: d.t,
        h: d.h,
        w: d.w,
        b: d.b,
        n_d: d.n_d,
        m: d.m,
        ..cfg.encoder_cfg()
    }
}

fn decoder_cfg_for(ds: &Dataset, cfg: &RunConfig) -> DecoderCfg {
    DecoderCfg {
        t: ds.manifest.dims.t,
        n_crops: ds.manifest.crops.len(),
        ..cfg.decoder_cfg()
    }
}

fn load_model(ds: &Dataset, cfg: &RunConfig, out_dir: &Path) -> Result<Model> {
    let enc = Encoder::new(encoder_cfg_for(ds, cfg))?;
    let dec = Decoder::new(decoder_cfg_for(ds, cfg))?;
    let ck = Checkpoint::load(&out_dir.join("finetune.ckpt"))?;
    model_from_checkpoint(enc, dec, &ck)
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(out) = &common.out {
        cfg.data_dir = out.display().to_string();
    }
    let dir = PathBuf::from(&cfg.data_dir);
    let ds = generate_dataset(&cfg.gen, cfg.seed, &dir)?;
    let mut artifacts = vec![dir.join("manifest.json")];
    for s in &ds.samples {
        artifacts.push(dir.join(format!("{}_sits.pyt", s.rec.id)));
        artifacts.push(dir.join(format!("{}_mts.pyt", s.rec.id)));
    }
    write_run_json(&dir, "gen-data", &cfg, &artifacts)?;
    println!(
        "wrote {} samples ({} crops, {} counties) to {}",
        ds.samples.len(),
        ds.manifest.crops.len(),
        cfg.gen.n_counties,
        dir.display()
    );
    Ok(())
}

fn resolve_out(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = resolve_out(common, &cfg);
    let ds = read_dataset(Path::new(&cfg.data_dir))?;
    let enc = Encoder::new(encoder_cfg_for(&ds, &cfg))?;
    let (_, log) = run_pretrain(&enc, &ds, &cfg.pretrain, cfg.seed, &out)?;
    write_run_json(
        &out,
        "pretrain",
        &cfg,
        &[out.join("pretrain.ckpt"), out.join("pretrain_log.jsonl")],
    )?;
    let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!("pretrain finished: {} epochs, final loss {last:.6}", log.len());
    Ok(())
}

fn cmd_finetune(common: &Common, from_scratch: bool) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    cfg.finetune.from_scratch = cfg.finetune.from_scratch || from_scratch;
    let out = resolve_out(common, &cfg);
    let ds = read_dataset(Path::new(&cfg.data_dir))?;
    let enc = Encoder::new(encoder_cfg_for(&ds, &cfg))?;
    let dec = Decoder::new(decoder_cfg_for(&ds, &cfg))?;
    let pretrained = if cfg.finetune.from_scratch {
        None
    } else {
        let path = out.join("pretrain.ckpt");
        if !path.exists() {
            return Err(Error::Config(format!(
                "no pretrain checkpoint at {}; run `pheno pretrain` first or pass --from-scratch",
                path.display()
            )));
        }
        Some(Checkpoint::load(&path)?)
    };
    let ft = run_finetune(enc, dec, &ds, &cfg.finetune, cfg.seed, pretrained.as_ref(), &out)?;
    write_run_json(
        &out,
        "finetune",
        &cfg,
        &[out.join("finetune.ckpt"), out.join("finetune_log.jsonl")],
    )?;
    println!(
        "finetune finished: train loss {:.6}, best val loss {:.6}",
        ft.train_loss, ft.best_val_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    per_crop: BTreeMap<String, MetricTriple>,
    pooled: MetricTriple,
}

fn cmd_eval(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = resolve_out(common, &cfg);
    let ds = read_dataset(Path::new(&cfg.data_dir))?;
    let model = load_model(&ds, &cfg, &out)?;
    let test = ds.test_indices();

    let mut per_crop = BTreeMap::new();
    let mut rows: Vec<ReportRow> = Vec::new();
    for crop in &ds.manifest.crops {
        let idxs: Vec<usize> = test
            .iter()
            .copied()
            .filter(|&i| ds.samples[i].rec.crop_id == crop.crop_id)
            .collect();
        let (preds, targets) = predict_samples(&model, &ds, &idxs)?;
        let m = compute_metrics(&preds, &targets)?;
        rows.extend(metric_rows(&crop.name, "test", &m));
        println!(
            "{:<14} rmse {:>10.4}  r2 {}  n {}",
            crop.name,
            m.rmse,
            m.r2.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.n
        );
        per_crop.insert(crop.name.clone(), m);
    }
    let (preds, targets) = predict_samples(&model, &ds, &test)?;
    let pooled = compute_metrics(&preds, &targets)?;
    rows.extend(metric_rows("all", "test", &pooled));

    write_report_json(&out.join("eval_report.json"), &EvalReport { per_crop, pooled })?;
    write_report_csv(&out.join("eval_report.csv"), &rows)?;
    write_run_json(
        &out,
        "eval",
        &cfg,
        &[out.join("eval_report.json"), out.join("eval_report.csv")],
    )
}

fn cmd_realtime(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = resolve_out(common, &cfg);
    let ds = read_dataset(Path::new(&cfg.data_dir))?;
    let model = load_model(&ds, &cfg, &out)?;
    let curves = realtime_eval(&model, &ds, &ds.test_indices())?;

    let mut rows: Vec<ReportRow> = Vec::new();
    for c in &curves {
        for (t, m) in &c.points {
            rows.extend(metric_rows(&c.crop, &format!("t={t}"), m));
        }
        let first = &c.points.first().expect("curve has points").1;
        let last = &c.points.last().expect("curve has points").1;
        println!(
            "{:<14} rmse {:.4} at season start -> {:.4} at season end",
            c.crop, first.rmse, last.rmse
        );
    }
    write_report_json(&out.join("realtime_report.json"), &curves)?;
    write_report_csv(&out.join("realtime_report.csv"), &rows)?;
    write_run_json(
        &out,
        "realtime",
        &cfg,
        &[out.join("realtime_report.json"), out.join("realtime_report.csv")],
    )
}

#[derive(Serialize)]
struct RobustnessReport {
    volatility_quantile: f64,
    stable: MetricTriple,
    volatile: MetricTriple,
    /// Per-crop mean d(prediction)/d(variable) under a uniform shift.
    sensitivity_variable: usize,
    sensitivity: Vec<f64>,
}

fn cmd_robustness(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = resolve_out(common, &cfg);
    let ds = read_dataset(Path::new(&cfg.data_dir))?;
    let model = load_model(&ds, &cfg, &out)?;
    let test = ds.test_indices();

    let (stable_idx, volatile_idx) =
        volatility_split(&ds, &test, cfg.eval.volatility_quantile)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut cohort_metrics = Vec::new();
    for (name, idxs) in [("stable", &stable_idx), ("volatile", &volatile_idx)] {
        let (preds, targets) = predict_samples(&model, &ds, idxs)?;
        let m = compute_metrics(&preds, &targets)?;
        rows.extend(metric_rows("all", name, &m));
        println!("{name:<9} cohort: rmse {:.4}, n {}", m.rmse, m.n);
        cohort_metrics.push(m);
    }
    let sensitivity = sensitivity_probe(
        &model,
        &ds,
        &test,
        cfg.eval.sensitivity_variable,
        cfg.eval.sensitivity_delta,
    )?;
    for (crop, s) in ds.manifest.crops.iter().zip(&sensitivity) {
        println!("sensitivity {:<14} {s:+.4}", crop.name);
    }

    let report = RobustnessReport {
        volatility_quantile: cfg.eval.volatility_quantile,
        stable: cohort_metrics[0].clone(),
        volatile: cohort_metrics[1].clone(),
        sensitivity_variable: cfg.eval.sensitivity_variable,
        sensitivity,
    };
    write_report_json(&out.join("robustness_report.json"), &report)?;
    write_report_csv(&out.join("robustness_report.csv"), &rows)?;
    write_run_json(
        &out,
        "robustness",
        &cfg,
        &[out.join("robustness_report.json"), out.join("robustness_report.csv")],
    )
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = resolve_out(common, &cfg);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let reports = check_all_ops(cfg.seed, 20, 1e-3)?;
    let mut all_pass = true;
    for r in &reports {
        println!("{}", r.line());
        all_pass &= r.pass;
    }
    write_report_json(&out.join("gradcheck_report.json"), &reports)?;
    write_run_json(&out, "gradcheck", &cfg, &[out.join("gradcheck_report.json")])?;
    if !all_pass {
        return Err(Error::Domain("gradient check failed for at least one op".into()));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Pretrain(c) => cmd_pretrain(c),
        Command::Finetune { common, from_scratch } => cmd_finetune(common, *from_scratch),
        Command::Eval(c) => cmd_eval(c),
        Command::Realtime(c) => cmd_realtime(c),
        Command::Robustness(c) => cmd_robustness(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
