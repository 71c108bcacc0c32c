use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use relprune::config::RunConfig;
use relprune::metrics::{self, evaluate_accuracy, mean_variance, sparsity_report};
use relprune::pipeline::{self, load_model, load_split, SplitChoice};
use relprune::regularizer::IrrelevanceMap;

const DATA_ENV: &str = "RELPRUNE_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "relprune",
    version,
    about = "Relevance-regularized training and magnitude pruning for LeNet-5"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with gated pruning and write checkpoint, logs and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data_dir` from the config.
        #[arg(long, env = DATA_ENV)]
        data_dir: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print accuracy and sparsity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = DATA_ENV)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitChoice,
        /// Seed of the train/validation split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        val_size: usize,
    },
    /// Write irrelevance and weight-magnitude histograms of one layer as CSV.
    ExportHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, env = DATA_ENV)]
        data_dir: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_BINS)]
        bins: usize,
        /// Size of the batch whose gradients give the irrelevance.
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value = "test")]
        split: SplitChoice,
    },
    /// Sparsity report for one or more checkpoints, with mean and variance
    /// across them.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Also report test accuracy.
        #[arg(long, env = DATA_ENV)]
        data_dir: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn cmd_train(config: PathBuf, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let (_, summary) = pipeline::train(&cfg)?;
    println!("output_dir\t{}", cfg.output_dir.display());
    println!("test_accuracy\t{:.2}", summary.test_accuracy);
    println!("prune_events\t{}", summary.outcome.state.prune_events.len());
    print!("{}", summary.report);
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data_dir: PathBuf, split: SplitChoice, seed: u64, val_size: usize) -> Result<()> {
    let (spec, store) = load_model(&checkpoint)?;
    let data = load_split(&data_dir, split, seed, val_size)
        .with_context(|| format!("loading data from {}", data_dir.display()))?;
    let acc = evaluate_accuracy(&spec, &store, &data)?;
    let report = sparsity_report(&store)?;
    println!("variant\t{}", spec.name);
    println!("accuracy\t{acc:.2}");
    println!("sparsity_percent\t{:.2}", report.sparsity_percent);
    println!("compression_ratio\t{:.2}", report.compression_ratio);
    println!("total_params\t{}", report.total_params);
    println!("remaining\t{}", report.remaining);
    for (name, residual) in &report.per_layer {
        println!("residual_percent.{name}\t{residual:.2}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_export_hist(
    checkpoint: PathBuf,
    layer: String,
    data_dir: PathBuf,
    out: PathBuf,
    bins: usize,
    batch_size: usize,
    split: SplitChoice,
) -> Result<()> {
    let (spec, store) = load_model(&checkpoint)?;
    metrics::resolve_layer(&store, &layer)?;
    let data =
        load_split(&data_dir, split, 0, 5000).with_context(|| format!("loading data from {}", data_dir.display()))?;
    let batch = data.batches(batch_size.max(1)).next().context("data split is empty")?;
    let (_, grads) = spec.loss_and_grads(&store, batch.images, &batch.labels)?;
    let irr = IrrelevanceMap::compute(&store, grads.params());
    let (irr_path, norm_path) = metrics::export_histograms(&store, &irr, &layer, bins, &out)?;
    println!("{}", irr_path.display());
    println!("{}", norm_path.display());
    Ok(())
}

fn cmd_report(checkpoints: Vec<PathBuf>, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let test = match &data_dir {
        Some(d) => {
            Some(load_split(d, SplitChoice::Test, 0, 0).with_context(|| format!("loading data from {}", d.display()))?)
        }
        None => None,
    };
    let mut text = String::new();
    let mut sparsities = Vec::new();
    let mut accuracies = Vec::new();
    for path in &checkpoints {
        let (spec, store) = load_model(path)?;
        let report = sparsity_report(&store)?;
        text.push_str(&format!("checkpoint\t{}\n", path.display()));
        text.push_str(&report.to_string());
        if let Some(test) = &test {
            let acc = evaluate_accuracy(&spec, &store, test)?;
            text.push_str(&format!("test_accuracy\t{acc:.2}\n"));
            accuracies.push(acc);
        }
        sparsities.push(report.sparsity_percent);
    }
    if checkpoints.len() > 1 {
        text.push_str(&format!("runs\t{}\n", checkpoints.len()));
        if let Some((m, v)) = mean_variance(&sparsities) {
            text.push_str(&format!("sparsity_mean\t{m:.4}\nsparsity_var\t{v:.6}\n"));
        }
        if let Some((m, v)) = mean_variance(&accuracies) {
            text.push_str(&format!("test_accuracy_mean\t{m:.4}\ntest_accuracy_var\t{v:.6}\n"));
        }
    }
    match out {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data_dir, out } => cmd_train(config, data_dir, out),
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            seed,
            val_size,
        } => cmd_eval(checkpoint, data_dir, split, seed, val_size),
        Command::ExportHist {
            checkpoint,
            layer,
            data_dir,
            out,
            bins,
            batch_size,
            split,
        } => cmd_export_hist(checkpoint, layer, data_dir, out, bins, batch_size, split),
        Command::Report {
            checkpoint,
            data_dir,
            out,
        } => cmd_report(checkpoint, data_dir, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
