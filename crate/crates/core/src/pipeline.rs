//! Stage drivers behind the command line: synthetic data, training,
//! inference, evaluation and the end-to-end smoke run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;

use crate::config::Config;
use crate::data::{load_paired_dir, png_stems, write_synthetic_dataset, PairedSample, Reject, Split, SHADOW_DIR, SHADOW_FREE_DIR};
use crate::error::{ensure, Error, Result};
use crate::evaluate::{evaluate_dir, EvalReport};
use crate::image::ImageTensor;
use crate::io::write_atomic;
use crate::nn::rng_for;
use crate::trainer::{run_training, Checkpoint, RunOptions, StepMetrics, TrainState};

const STREAM_INFER: u64 = 30;

pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const IMAGES_DIR: &str = "images";
pub const REPORTS_DIR: &str = "reports";
pub const LOGS_DIR: &str = "logs";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_FILE: &str = "config.toml";
pub const INFER_MANIFEST: &str = "infer_manifest.tsv";
pub const EVAL_REPORT: &str = "eval.tsv";

/// Fixed directory layout under one `--out` root.
#[derive(Debug, Clone)]
pub struct OutLayout {
    pub root: PathBuf,
}

impl OutLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINTS_DIR)
    }

    pub fn images(&self) -> PathBuf {
        self.root.join(IMAGES_DIR)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join(REPORTS_DIR)
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join(LOGS_DIR)
    }

    pub fn metrics(&self) -> PathBuf {
        self.logs().join(METRICS_FILE)
    }

    /// Refuses a non-empty `dir` unless `force`, in which case it is emptied.
    fn claim(dir: &Path, force: bool) -> Result<()> {
        if dir_has_entries(dir)? {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

fn dir_has_entries(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    ensure(dir.is_dir(), || format!("{} exists and is not a directory", dir.display()))?;
    let mut it = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(it.next().is_some())
}

fn refuse_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut text = String::from("id\treason\n");
    for r in rejects {
        text.push_str(&format!("{}\t{}\n", r.id, r.reason.replace(['\t', '\n'], " ")));
    }
    write_atomic(path, text.as_bytes())
}

/// `n_train + n_test` synthetic pairs under `out` (`train/`, `test/`, manifest).
pub fn make_synthetic(out: &Path, n_train: usize, n_test: usize, size: usize, seed: u64, force: bool) -> Result<()> {
    OutLayout::claim(out, force)?;
    write_synthetic_dataset(out, n_train, n_test, size, seed)?;
    Ok(())
}

/// Loads the train split and resizes pairs to the configured resolution.
pub fn load_training_set(data_root: &Path, config: &Config) -> Result<(Vec<PairedSample>, Vec<Reject>)> {
    let ds = load_paired_dir(data_root, Split::Train)?;
    let r = config.data.resolution;
    let mut samples = Vec::with_capacity(ds.samples.len());
    for s in ds.samples {
        samples.push(if s.shadow.height() == r && s.shadow.width() == r {
            s
        } else {
            PairedSample::new(s.shadow.resize_bilinear(r, r)?, s.shadow_free.resize_bilinear(r, r)?, s.id)?
        });
    }
    ensure(!samples.is_empty(), || format!("no usable training pairs under {}", data_root.display()))?;
    Ok((samples, ds.rejects))
}

#[derive(Debug)]
pub struct TrainSummary {
    pub last_checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub steps: u64,
}

/// Trains into `out/checkpoints` with metrics in `out/logs`. A resumed run
/// continues in place; a fresh run needs an empty `out` or `force`.
pub fn train(config: &Config, data_root: &Path, out: &Path, resume: Option<&Path>, force: bool) -> Result<TrainSummary> {
    config.validate()?;
    let layout = OutLayout::new(out);
    if resume.is_none() {
        for d in [layout.checkpoints(), layout.logs(), layout.reports()] {
            OutLayout::claim(&d, force)?;
        }
    }
    let (samples, rejects) = load_training_set(data_root, config)?;
    fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;
    write_rejects(&layout.reports().join("train_rejects.tsv"), &rejects)?;
    write_atomic(&layout.logs().join(CONFIG_FILE), config.to_flat_toml()?.as_bytes())?;
    let outcome = run_training(
        config,
        &samples,
        &RunOptions {
            checkpoint_dir: layout.checkpoints(),
            metrics_path: layout.metrics(),
            resume: resume.map(Path::to_path_buf),
            stop_at: None,
            dtype: DType::F32,
        },
    )?;
    Ok(TrainSummary {
        last_checkpoint: outcome.last_checkpoint,
        steps: outcome.state.step,
        metrics: outcome.metrics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRecord {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct InferSummary {
    pub records: Vec<InferRecord>,
    pub rejects: Vec<Reject>,
}

/// Restores every PNG in `input_dir` with the checkpoint's EMA weights.
/// Outputs go to `out/images/<id>.png`, timings to `out/reports/infer_manifest.tsv`.
/// `expected` (if given) must match the checkpoint's config fingerprint.
pub fn infer(
    checkpoint: &Path,
    input_dir: &Path,
    out: &Path,
    steps: Option<usize>,
    seed: u64,
    expected: Option<&Config>,
    force: bool,
) -> Result<InferSummary> {
    ensure(input_dir.is_dir(), || format!("{} is not a directory", input_dir.display()))?;
    let ck = Checkpoint::load(checkpoint)?;
    let config = expected.unwrap_or(&ck.config).clone();
    let model = TrainState::from_checkpoint(&ck, &config)?.ema_model()?;
    let n_steps = steps.unwrap_or(config.diffusion.sample_steps);
    ensure(n_steps >= 1 && n_steps <= config.diffusion.steps, || {
        format!("sampling steps must be in 1..={}, got {n_steps}", config.diffusion.steps)
    })?;
    let layout = OutLayout::new(out);
    OutLayout::claim(&layout.images(), force)?;
    let manifest = layout.reports().join(INFER_MANIFEST);
    refuse_file(&manifest, force)?;
    fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, id) in png_stems(input_dir)?.into_iter().enumerate() {
        let img = match ImageTensor::load_png(&input_dir.join(format!("{id}.png"))) {
            Ok(img) => img,
            Err(e) => {
                rejects.push(Reject {
                    id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let start = Instant::now();
        let mut rng = rng_for(seed, STREAM_INFER, i as u64);
        let restored = model.restore(&img, &mut rng, n_steps)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        restored.save_png(&layout.images().join(format!("{id}.png")))?;
        records.push(InferRecord {
            id,
            height: img.height(),
            width: img.width(),
            wall_ms,
        });
    }
    let mut text = String::from("id\tstatus\theight\twidth\twall_ms\n");
    for r in &records {
        text.push_str(&format!("{}\tok\t{}\t{}\t{:.3}\n", r.id, r.height, r.width, r.wall_ms));
    }
    for r in &rejects {
        text.push_str(&format!("{}\trejected\t\t\t\t# {}\n", r.id, r.reason.replace(['\t', '\n'], " ")));
    }
    write_atomic(&manifest, text.as_bytes())?;
    Ok(InferSummary { records, rejects })
}

/// Writes the evaluation TSV to `report_path`.
pub fn eval(pred: &Path, gt: &Path, resolution: usize, report_path: &Path, force: bool) -> Result<EvalReport> {
    refuse_file(report_path, force)?;
    let report = evaluate_dir(pred, gt, resolution)?;
    write_atomic(report_path, report.to_tsv().as_bytes())?;
    Ok(report)
}

pub const SMOKE_PAIRS: usize = 16;
pub const SMOKE_TEST_PAIRS: usize = 4;
pub const SMOKE_SIZE: usize = 64;
pub const SMOKE_STEPS: u64 = 50;
pub const SMOOTH_WINDOW: usize = 10;

/// Trailing moving average; entry `i` averages `v[i+1-w ..= i]` (shorter at the start).
pub fn smoothed(v: &[f64], window: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Debug)]
pub struct SmokeSummary {
    pub smoothed_first: f64,
    pub smoothed_last: f64,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

/// Synthetic data, 50 training steps, inference on the test split and
/// evaluation, all under `out`. Each failure names its stage.
pub fn smoke(base: &Config, out: &Path, force: bool) -> Result<SmokeSummary> {
    let config = stage(
        "config",
        base.with_overrides(&[
            format!("data.resolution={SMOKE_SIZE}"),
            format!("train.max_steps={SMOKE_STEPS}"),
        ]),
    )?;
    let layout = OutLayout::new(out);
    stage("config", OutLayout::claim(out, force))?;
    let data_root = out.join("data");
    stage(
        "make-synthetic",
        make_synthetic(&data_root, SMOKE_PAIRS, SMOKE_TEST_PAIRS, SMOKE_SIZE, config.train.seed, false),
    )?;
    let trained = stage("train", train(&config, &data_root, out, None, false))?;
    let test_dir = data_root.join(Split::Test.as_str());
    stage(
        "infer",
        infer(
            &trained.last_checkpoint,
            &test_dir.join(SHADOW_DIR),
            out,
            None,
            config.train.seed,
            Some(&config),
            false,
        ),
    )?;
    let report = stage(
        "eval",
        eval(
            &layout.images(),
            &test_dir.join(SHADOW_FREE_DIR),
            SMOKE_SIZE,
            &layout.reports().join(EVAL_REPORT),
            false,
        ),
    )?;
    stage("check", check_smoke(&layout, &trained, &report))
}

fn check_smoke(layout: &OutLayout, trained: &TrainSummary, report: &EvalReport) -> Result<SmokeSummary> {
    for p in [
        trained.last_checkpoint.clone(),
        layout.metrics(),
        layout.reports().join(INFER_MANIFEST),
        layout.reports().join(EVAL_REPORT),
    ] {
        ensure(p.is_file(), || format!("missing artifact {}", p.display()))?;
    }
    ensure(report.rows.len() == SMOKE_TEST_PAIRS && report.rejects.is_empty(), || {
        format!("expected {SMOKE_TEST_PAIRS} evaluated images, got {} ({} rejected)", report.rows.len(), report.rejects.len())
    })?;
    let totals: Vec<f64> = trained.metrics.iter().map(|m| m.l_total).collect();
    ensure(totals.len() as u64 == SMOKE_STEPS, || format!("expected {SMOKE_STEPS} metric rows, got {}", totals.len()))?;
    let s = smoothed(&totals, SMOOTH_WINDOW);
    let (first, last) = (s[SMOOTH_WINDOW - 1], s[s.len() - 1]);
    ensure(last < first, || format!("smoothed loss did not decrease: {first:.5} -> {last:.5}"))?;
    Ok(SmokeSummary {
        smoothed_first: first,
        smoothed_last: last,
        report: report.clone(),
        checkpoint: trained.last_checkpoint.clone(),
    })
}
