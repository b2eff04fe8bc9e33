//! Subcommand bodies. Each writes only beneath its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use aseg::data::{self, DatasetManifest, PhantomConfig, Split};
use aseg::gradsuite::{self, SuiteCase};
use aseg::metrics::{self, ComparisonRow};
use aseg::train::{self, Checkpoint, EvalOptions, Evaluation, ModelKind, TrainLog};

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.echo";
pub const TRAIN_LOG: &str = "trainlog.csv";
pub const CHECKPOINT: &str = "final.aseg";
pub const MANIFEST: &str = "manifest.tsv";
pub const RECORDS: &str = "records.csv";
pub const SUMMARY: &str = "summary.txt";
pub const TIMING: &str = "timing.txt";
pub const SAMPLES: &str = "samples";
pub const COMPARISON: &str = "compare.txt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn phantom(cfg: &PhantomConfig, out: &Path) -> Result<usize> {
    let written = data::write_phantoms(cfg, out)?;
    Ok(written.len())
}

/// Scans `data` and tags entries per the run's counts and split mode.
pub fn prepare_split(cfg: &RunConfig, data_dir: &Path) -> Result<DatasetManifest> {
    let manifest = data::scan_dataset(data_dir)?;
    if manifest.is_empty() {
        bail!("no image/mask pairs under {}", data_dir.display());
    }
    let total = manifest.len();
    let reserved = cfg.test_count.unwrap_or(0);
    let n_train = match cfg.train_count {
        Some(n) => n,
        None => total
            .checked_sub(reserved)
            .ok_or_else(|| anyhow!("test count {reserved} exceeds dataset size {total}"))?,
    };
    Ok(data::split_counts(&manifest, n_train, cfg.test_count, cfg.split_mode())?)
}

#[derive(Debug)]
pub struct TrainReport {
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
    pub train_count: usize,
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainReport> {
    create_dir(out)?;
    write(&out.join(CONFIG_ECHO), cfg.echo())?;
    let manifest = prepare_split(cfg, data_dir)?;
    write(&out.join(MANIFEST), manifest.to_tsv())?;
    let pairs = data::load_split(&manifest, Split::Train, cfg.image_size)?;
    let outcome = train::train(&cfg.train_config(), &pairs)?;
    write(&out.join(TRAIN_LOG), outcome.log.to_csv())?;
    train::save_checkpoint(&outcome.checkpoint, out.join(CHECKPOINT))?;
    write_timing(out, Timing { train_seconds: Some(outcome.log.total_seconds()), test_seconds: None })?;
    Ok(TrainReport { log: outcome.log, checkpoint: outcome.checkpoint, train_count: pairs.len() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub train_seconds: Option<f64>,
    pub test_seconds: Option<f64>,
}

fn write_timing(dir: &Path, t: Timing) -> Result<()> {
    let mut text = String::new();
    if let Some(s) = t.train_seconds {
        text.push_str(&format!("train_seconds = {s}\n"));
    }
    if let Some(s) = t.test_seconds {
        text.push_str(&format!("test_seconds = {s}\n"));
    }
    write(&dir.join(TIMING), text)
}

/// Reads `timing.txt` in `dir`; a missing file yields no timings.
pub fn read_timing(dir: &Path) -> Result<Timing> {
    let path = dir.join(TIMING);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(Timing::default());
    };
    let mut t = Timing::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: malformed line {line:?}", path.display()))?;
        let v: f64 = v.trim().parse().with_context(|| format!("{}: bad number in {line:?}", path.display()))?;
        match k.trim() {
            "train_seconds" => t.train_seconds = Some(v),
            "test_seconds" => t.test_seconds = Some(v),
            other => bail!("{}: unknown key {other:?}", path.display()),
        }
    }
    Ok(t)
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub split: Split,
    pub options: EvalOptions,
    /// Split settings; when `None` the manifest saved beside the checkpoint is reused.
    pub split_config: Option<RunConfig>,
    pub out: &'a Path,
    pub samples: bool,
}

pub fn eval(req: &EvalRequest<'_>) -> Result<Evaluation> {
    let ckpt = train::load_checkpoint(req.checkpoint)?;
    let manifest = match &req.split_config {
        Some(cfg) => prepare_split(cfg, req.data)?,
        None => {
            let dir = req.checkpoint.parent().unwrap_or(Path::new("."));
            let path = dir.join(MANIFEST);
            let text = fs::read_to_string(&path).with_context(|| {
                format!("reading {} (pass --train-count to split explicitly)", path.display())
            })?;
            data::scan_dataset(req.data)?.apply_tsv(&text)?
        }
    };
    let pairs = data::load_split(&manifest, req.split, ckpt.image_size())?;
    if pairs.is_empty() {
        bail!("the {} split is empty", req.split);
    }
    let evaluation = train::evaluate_checkpoint(&ckpt, &pairs, &req.options)?;
    create_dir(req.out)?;
    write(&req.out.join(RECORDS), metrics::render_records_csv(&evaluation.records))?;
    write(&req.out.join(SUMMARY), metrics::render_summary_table(&evaluation.summaries))?;
    let train_seconds = read_timing(req.checkpoint.parent().unwrap_or(Path::new(".")))?.train_seconds;
    write_timing(req.out, Timing { train_seconds, test_seconds: Some(evaluation.seconds) })?;
    if req.samples {
        train::write_samples(&ckpt, &pairs, req.out.join(SAMPLES), &req.options)?;
    }
    Ok(evaluation)
}

/// Writes `<stem>_mask.png` (and `<stem>_raw.png` when asked) under `out`.
pub fn infer(checkpoint: &Path, input: &Path, out: &Path, raw: bool, options: &EvalOptions) -> Result<PathBuf> {
    let ckpt = train::load_checkpoint(checkpoint)?;
    create_dir(out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = out.join(format!("{stem}_mask.png"));
    let raw_path = out.join(format!("{stem}_raw.png"));
    train::infer(&ckpt, input, &mask_path, raw.then_some(raw_path.as_path()), options)?;
    Ok(mask_path)
}

pub fn render_gradcheck(cases: &[SuiteCase]) -> String {
    let mut out = String::new();
    for c in cases {
        out.push_str(&format!(
            "{}\t{:<28}\tmax_rel_error {:.3e}\ttolerance {:.0e}\tchecked {}\n",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.checked
        ));
    }
    out
}

pub fn gradcheck(seed: u64, out: Option<&Path>) -> Result<Vec<SuiteCase>> {
    let cases = gradsuite::gradient_suite(seed)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("gradcheck.txt"), render_gradcheck(&cases))?;
    }
    Ok(cases)
}

/// One comparison row from a report directory holding `summary.txt` and
/// optionally `timing.txt`, or from a summary file directly.
pub fn load_report(path: &Path, label: &str) -> Result<ComparisonRow> {
    let (summary_path, dir) = if path.is_dir() {
        (path.join(SUMMARY), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let text = fs::read_to_string(&summary_path).with_context(|| format!("reading {}", summary_path.display()))?;
    let summaries =
        metrics::parse_summary_table(&text).with_context(|| format!("parsing {}", summary_path.display()))?;
    let timing = if path.is_dir() { read_timing(&dir)? } else { Timing::default() };
    Ok(ComparisonRow {
        label: label.to_string(),
        summaries,
        train_seconds: timing.train_seconds,
        test_seconds: timing.test_seconds,
    })
}

pub fn compare_reports(rows: &[ComparisonRow], out: Option<&Path>) -> Result<String> {
    let table = metrics::render_comparison_table(rows);
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join(COMPARISON), &table)?;
    }
    Ok(table)
}

/// Trains and tests both models on the same split, then renders the comparison.
pub fn compare_run(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(String, Vec<Evaluation>)> {
    let mut rows = Vec::new();
    let mut evaluations = Vec::new();
    for (model, label) in [(ModelKind::Pix2Pix, "Pix2Pix"), (ModelKind::UnetBaseline, "U-Net")] {
        let run_cfg = RunConfig { model, ..cfg.clone() };
        let dir = out.join(model.to_string());
        let report = train(&run_cfg, data_dir, &dir)?;
        let evaluation = eval(&EvalRequest {
            checkpoint: &dir.join(CHECKPOINT),
            data: data_dir,
            split: Split::Test,
            options: EvalOptions::default(),
            split_config: None,
            out: &dir,
            samples: false,
        })?;
        rows.push(ComparisonRow {
            label: label.to_string(),
            summaries: evaluation.summaries.clone(),
            train_seconds: Some(report.log.total_seconds()),
            test_seconds: Some(evaluation.seconds),
        });
        evaluations.push(evaluation);
    }
    Ok((compare_reports(&rows, Some(out))?, evaluations))
}
