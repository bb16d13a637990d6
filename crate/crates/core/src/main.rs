use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use irsqueeze::diffusion::{build_schedule, ScheduleKind};
use irsqueeze::evaluation::Connectivity;
use irsqueeze::pipeline::{
    ingest, report, run_augment, select_training, write_report, AugmentOptions, MetricOptions, PipelineConfig,
};
use irsqueeze::{Error, Result};

/// Gaussian group squeezing augmentation and target-level evaluation.
#[derive(Parser)]
#[command(name = "irsqueeze", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair images with masks and print the dataset index.
    Ingest(DataArgs),
    /// Print the training subset selected by the hold-out and scarcity ratio.
    Split(DataArgs),
    /// Generate augmented samples and their manifest.
    Augment(AugmentArgs),
    /// Score prediction maps against ground-truth masks.
    Report(ReportArgs),
    /// Write a noise schedule table.
    ScheduleExport(ScheduleArgs),
}

#[derive(Args)]
struct Overrides {
    /// Pipeline config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ratio: Option<f64>,
}

impl Overrides {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.dataset_root = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.ratio {
            cfg.ratio = r;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Overrides,
    /// Write the index here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    common: Overrides,
    /// Backend to apply; repeat to build a chain. Replaces the configured chain.
    #[arg(long = "backend")]
    backends: Vec<String>,
    #[arg(long)]
    passes: Option<u32>,
    /// Output root; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep existing manifest records and generate only the missing samples.
    #[arg(long)]
    resume: bool,
    /// Keep the per-batch scratch directory.
    #[arg(long)]
    keep_work: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Config whose `[metrics]` table supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of prediction maps (grayscale, binarized at the threshold).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    /// Directory for report.jsonl, report.txt and sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = ["4", "8"])]
    connectivity: Option<String>,
    #[arg(long)]
    match_radius: Option<f64>,
    /// Headline IoU averages per-image IoUs instead of pooling counts.
    #[arg(long)]
    per_image_average: bool,
    #[arg(long)]
    sweep_steps: Option<usize>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "linear")]
    kind: ScheduleKind,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => {
            let cfg = args.common.load()?;
            let index = ingest(&cfg.dataset_root, &cfg.images_dir, &cfg.masks_dir)?;
            index.check_pairs()?;
            emit(&index.to_tsv(), args.out.as_deref())
        }
        Command::Split(args) => {
            let cfg = args.common.load()?;
            let index = ingest(&cfg.dataset_root, &cfg.images_dir, &cfg.masks_dir)?;
            emit(&select_training(&index, &cfg)?.to_tsv(), args.out.as_deref())
        }
        Command::Augment(args) => {
            let mut cfg = args.common.load()?;
            if !args.backends.is_empty() {
                cfg.chain = args.backends;
            }
            if let Some(n) = args.passes {
                cfg.passes = n;
            }
            if let Some(o) = args.out {
                cfg.output_root = o;
            }
            let summary = run_augment(
                &cfg,
                &AugmentOptions {
                    resume: args.resume,
                    keep_work: args.keep_work,
                },
            )?;
            println!(
                "{} records ({} resumed) -> {}",
                summary.records.len(),
                summary.resumed,
                summary.manifest.display()
            );
            Ok(())
        }
        Command::Report(args) => {
            let mut opts = match &args.config {
                Some(p) => PipelineConfig::load(p)?.metrics,
                None => MetricOptions::default(),
            };
            if let Some(t) = args.threshold {
                opts.threshold = t;
            }
            if let Some(c) = args.connectivity.as_deref() {
                opts.connectivity = if c == "4" {
                    Connectivity::Four
                } else {
                    Connectivity::Eight
                };
            }
            if let Some(r) = args.match_radius {
                opts.match_radius = r;
            }
            if let Some(s) = args.sweep_steps {
                opts.sweep_steps = s;
            }
            opts.per_image_average |= args.per_image_average;
            let outcome = report(&opts, &args.pred, &args.gt)?;
            if !outcome.aggregate.unmatched.is_empty() {
                eprintln!(
                    "warning: {} unmatched sample ids excluded",
                    outcome.aggregate.unmatched.len()
                );
            }
            match &args.out {
                Some(dir) => write_report(&outcome, dir),
                None => {
                    print!("{}", irsqueeze::pipeline::render_table(&outcome));
                    Ok(())
                }
            }
        }
        Command::ScheduleExport(args) => {
            let sched = build_schedule(args.kind, args.steps, args.beta_start, args.beta_end)?;
            emit(&sched.export_table(), args.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
