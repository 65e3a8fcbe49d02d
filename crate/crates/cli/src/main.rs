use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use tumorgraph_core::metrics::Summary;
use tumorgraph_core::phantom::generate_dataset;
use tumorgraph_core::pipeline::{self, PipelineConfig, Stage};
use tumorgraph_core::volume::Split;
use tumorgraph_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tumorgraph", version, about = "Supervoxel graph + CNN brain tumour segmentation")]
struct Cli {
    /// Worker threads for case-level parallelism (0 = all cores; 1 = fully deterministic).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Gnn,
    Cnn,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of phantom cases plus a manifest.
    GenPhantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Phantom geometry and contrast come from the `[phantom]` table.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Crop, rescale and standardize a raw dataset.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Grid-search SLIC parameters by achievable segmentation accuracy.
    TuneSlic {
        /// Preprocessed dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        m_grid: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        max_iter: usize,
        /// CSV copy of the table.
        #[arg(long, default_value = "asa_table.csv")]
        out: PathBuf,
    },
    /// Train the GNN, the CNN, or both in sequence.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Segment every case of a preprocessed dataset.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gnn: PathBuf,
        /// Without a CNN checkpoint the GNN prediction is written as is.
        #[arg(long)]
        cnn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configuration saved next to the GNN checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Score predictions against ground truth (Dice and HD95 per region).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// HD95 for a region present in only one of the two masks.
        #[arg(long)]
        penalty: Option<f64>,
    },
}

fn print_summary(s: &Summary) {
    let names = ["dice_wt", "dice_tc", "dice_et", "hd95_wt", "hd95_tc", "hd95_et"];
    println!("{:<8} {:>10} {:>10}", "metric", "mean", "median");
    for (i, n) in names.iter().enumerate() {
        println!("{n:<8} {:>10.4} {:>10.4}", s.mean[i], s.median[i]);
    }
}

fn resolved(config: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load_or_default(config)?;
    cfg.log_resolved();
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenPhantoms { out, train, val, seed, config } => {
            let cfg = resolved(config.as_deref())?;
            let cases = generate_dataset(&cfg.phantom, &out, train, val, seed)?;
            log::info!("wrote {} cases to {}", cases.len(), out.display());
        }
        Command::Preprocess { data, out, config } => {
            resolved(config.as_deref())?;
            pipeline::preprocess_dataset(&data, &out)?;
            log::info!("preprocessed dataset written to {}", out.display());
        }
        Command::TuneSlic { data, k_grid, m_grid, max_iter, out } => {
            let result = pipeline::tune_slic(&data, &k_grid, &m_grid, max_iter)?;
            let table = pipeline::format_asa_table(&result);
            print!("{table}");
            println!("best: k={} m={} mean_asa={:.6}", result.best.k, result.best.m, result.best.mean_asa);
            std::fs::write(&out, table).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
        Command::Train { data, out, config, stage } => {
            let cfg = resolved(config.as_deref())?;
            let stage = match stage {
                StageArg::Gnn => Stage::Gnn,
                StageArg::Cnn => Stage::Cnn,
                StageArg::Both => Stage::Both,
            };
            pipeline::train(&data, &out, &cfg, stage)?;
        }
        Command::Predict { data, gnn, cnn, out, config, split } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => pipeline::training_config_near(&gnn)?,
            };
            cfg.log_resolved();
            let preds = pipeline::predict(&data, &gnn, cnn.as_deref(), &out, &cfg, split.map(Into::into))?;
            log::info!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Evaluate { pred, truth, out, config, split, penalty } => {
            let mut cfg = PipelineConfig::load_or_default(config.as_deref())?;
            if let Some(p) = penalty {
                cfg.metrics.empty_penalty = p;
            }
            cfg.validate()?;
            cfg.log_resolved();
            let reports = pipeline::evaluate(&pred, &truth, &cfg.metrics, split.map(Into::into))?;
            match pipeline::write_report(&out, &reports)? {
                Some(s) => print_summary(&s),
                None => log::warn!("no cases to evaluate"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = pipeline::with_jobs(cli.jobs, || run(cli.command)).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
