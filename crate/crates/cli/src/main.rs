use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use aseg::data::{PhantomConfig, Split};
use aseg::networks::NormStats;
use aseg::train::EvalOptions;
use aseg_cli::commands::{self, EvalRequest};
use aseg_cli::config::RunConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aseg", version, about = "Adversarial lung segmentation on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image/mask pairs under OUT/images and OUT/masks.
    Phantom(PhantomArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Segment one image with a checkpoint.
    Infer(InferArgs),
    /// Compare autodiff gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Render two evaluation reports side by side, or train and test both models first.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Pix2pix,
    Unet,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    /// Statistics of the image being segmented.
    Batch,
    /// Averages accumulated during training.
    Running,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1), got {s:?}")),
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    count: u32,
    #[arg(long, alias = "image-size", default_value_t = 64, value_parser = clap::value_parser!(u32).range(16..=4096))]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise std as a fraction of the 8-bit range.
    #[arg(long, default_value_t = 0.02, value_parser = non_negative_f64)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by `train` and `compare`; each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(16..=4096))]
    image_size: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    batch_size: Option<u32>,
    #[arg(long, value_parser = non_negative_f64)]
    lambda: Option<f64>,
    #[arg(long, value_parser = positive_f64)]
    lr: Option<f64>,
    /// Training entries taken from the sorted manifest.
    #[arg(long)]
    train_count: Option<usize>,
    /// Test entries; defaults to everything not used for training.
    #[arg(long)]
    test_count: Option<usize>,
    /// Shuffle the manifest with this seed before splitting.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(4..))]
    base_width: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=12))]
    depth: Option<u32>,
    #[arg(long, value_parser = unit_interval)]
    dropout: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(4..))]
    disc_base_width: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=8))]
    disc_layers: Option<u32>,
    #[arg(long)]
    shuffle: Option<Switch>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        let mut push = |key, value: Option<String>| {
            if let Some(v) = value {
                o.push((key, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("image_size", self.image_size.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("train_count", self.train_count.map(|v| v.to_string()));
        push("test_count", self.test_count.map(|v| v.to_string()));
        push("split_seed", self.split_seed.map(|v| v.to_string()));
        push("base_width", self.base_width.map(|v| v.to_string()));
        push("depth", self.depth.map(|v| v.to_string()));
        push("dropout", self.dropout.map(|v| v.to_string()));
        push("disc_base_width", self.disc_base_width.map(|v| v.to_string()));
        push("disc_layers", self.disc_layers.map(|v| v.to_string()));
        push("shuffle", self.shuffle.map(|s| if matches!(s, Switch::On) { "on" } else { "off" }.to_string()));
        o
    }

    fn resolve(&self, extra: &[(&'static str, String)]) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut overrides = extra.to_vec();
        overrides.extend(self.overrides());
        RunConfig::resolve(text.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<ModelArg>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Apply the generator's dropout noise at test time.
    #[arg(long, value_enum, default_value = "off")]
    noise: Switch,
    /// Seed for test-time noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Normalization statistics used at test time.
    #[arg(long, value_enum, default_value = "batch")]
    norm: NormArg,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-split the data instead of reusing the training run's manifest.
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long, requires = "train_count")]
    test_count: Option<usize>,
    #[arg(long, requires = "train_count")]
    split_seed: Option<u64>,
    /// Write input | prediction | ground-truth strips under OUT/samples.
    #[arg(long)]
    samples: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "off")]
    noise: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "batch")]
    norm: NormArg,
    /// Also write the pre-threshold output.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report directory (with summary.txt) or summary file; give exactly two.
    #[arg(long = "report", num_args = 1)]
    reports: Vec<PathBuf>,
    /// Row labels for the reports, in order.
    #[arg(long = "label", num_args = 1)]
    labels: Vec<String>,
    /// Train and test both models on this dataset instead of reading reports.
    #[arg(long, conflicts_with = "reports")]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

fn eval_options(noise: Switch, seed: u64, norm: NormArg) -> EvalOptions {
    let stats = match norm {
        NormArg::Batch => NormStats::Batch,
        NormArg::Running => NormStats::Running,
    };
    EvalOptions { noise: matches!(noise, Switch::On), noise_seed: seed, stats }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => {
            let cfg = PhantomConfig {
                count: a.count as usize,
                image_size: a.size as usize,
                seed: a.seed,
                noise_level: a.noise,
                ..PhantomConfig::default()
            };
            let n = commands::phantom(&cfg, &a.out)?;
            println!("wrote {n} phantom pairs to {}", a.out.display());
        }
        Command::Train(a) => {
            let model = a.model.map(|m| match m {
                ModelArg::Pix2pix => ("model", "pix2pix".to_string()),
                ModelArg::Unet => ("model", "unet".to_string()),
            });
            let cfg = a.run.resolve(&model.into_iter().collect::<Vec<_>>())?;
            let report = commands::train(&cfg, &a.data, &a.out)?;
            println!(
                "trained {} on {} samples for {} steps in {:.1} s; outputs in {}",
                cfg.model,
                report.train_count,
                report.checkpoint.step,
                report.log.total_seconds(),
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let split_config = match a.train_count {
                Some(n) => {
                    let mut o = vec![("train_count", n.to_string())];
                    if let Some(k) = a.test_count {
                        o.push(("test_count", k.to_string()));
                    }
                    if let Some(s) = a.split_seed {
                        o.push(("split_seed", s.to_string()));
                    }
                    Some(RunConfig::resolve(None, &o)?)
                }
                None => None,
            };
            let out = a
                .out
                .clone()
                .unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let evaluation = commands::eval(&EvalRequest {
                checkpoint: &a.checkpoint,
                data: &a.data,
                split: match a.split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
                options: eval_options(a.noise, a.seed, a.norm),
                split_config,
                out: &out,
                samples: a.samples,
            })?;
            print!("{}", aseg::metrics::render_summary_table(&evaluation.summaries));
            println!("{} images in {:.2} s", evaluation.records.len(), evaluation.seconds);
        }
        Command::Infer(a) => {
            let path = commands::infer(&a.checkpoint, &a.input, &a.out, a.raw, &eval_options(a.noise, a.seed, a.norm))?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck(a) => {
            let cases = commands::gradcheck(a.seed, a.out.as_deref())?;
            print!("{}", commands::render_gradcheck(&cases));
            let failed = cases.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                bail!("{failed} gradient checks exceeded tolerance");
            }
        }
        Command::Compare(a) => {
            let table = if let Some(data) = &a.data {
                let out = a.out.as_deref().context("--out is required with --data")?;
                let cfg = a.run.resolve(&[])?;
                commands::compare_run(&cfg, data, out)?.0
            } else {
                if a.reports.len() != 2 {
                    bail!("compare needs exactly two --report paths (or --data)");
                }
                let labels = match a.labels.len() {
                    0 => vec!["A".to_string(), "B".to_string()],
                    2 => a.labels.clone(),
                    n => bail!("expected two --label values, got {n}"),
                };
                let rows = a
                    .reports
                    .iter()
                    .zip(&labels)
                    .map(|(p, l)| commands::load_report(p, l))
                    .collect::<Result<Vec<_>>>()?;
                commands::compare_reports(&rows, a.out.as_deref())?
            };
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
