//! The `icc` command-line tool.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::io::{load_dataset, save_dataset};
use crate::data::synth::{generate_synthetic, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, infer, EvalResult};
use crate::flops::model_flops;
use crate::model::{Ablation, Model, ModelConfig};
use crate::tensor::Scalar;
use crate::train::{train, Precision, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "icc", version, about = "Crowd counting with an Inception-based network and the DM-Count loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    NoContext,
    NoInception,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoContext => Ablation::NoContext,
            AblationArg::NoInception => Ablation::NoInception,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, keeping the checkpoint with the best validation MAE.
    Train {
        /// key = value configuration file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        train_dir: Option<PathBuf>,
        #[arg(long)]
        val_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        precision: Option<PrecisionArg>,
        /// Channel width multiplier; 1.0 is the full model.
        #[arg(long)]
        width: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Report MAE and RMSE of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "32")]
        precision: PrecisionArg,
        /// Print the result as one JSON object.
        #[arg(long)]
        json: bool,
    },
    /// Write the predicted density map of one image and print its count.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Resize the map to the image size, preserving the count.
        #[arg(long)]
        upsample: bool,
        #[arg(long, default_value = "32")]
        precision: PrecisionArg,
    },
    /// Count the operations of one inference at the given image size.
    Flops {
        #[arg(default_value_t = 1080)]
        height: usize,
        #[arg(default_value_t = 1920)]
        width: usize,
        #[arg(long)]
        ablation: Option<AblationArg>,
        /// Channel width multiplier.
        #[arg(long = "width-multiplier", default_value_t = 1.0)]
        width_multiplier: f64,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Write a synthetic dataset of images and point files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long, default_value_t = 50)]
        max_count: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
}

fn print_eval(result: &EvalResult, json: bool) {
    if json {
        println!("{}", serde_json::to_string(result).expect("serializable"));
        return;
    }
    for r in &result.per_image {
        println!("{}\t{}\t{:.3}\t{:.3}s", r.id, r.truth, r.predicted, r.seconds);
    }
    println!("MAE {:.4}  RMSE {:.4}  ({} images)", result.mae, result.rmse, result.per_image.len());
}

fn with_model<R>(
    checkpoint: &Path,
    precision: PrecisionArg,
    f32_run: impl FnOnce(&Model<f32>) -> Result<R>,
    f64_run: impl FnOnce(&Model<f64>) -> Result<R>,
) -> Result<R> {
    match precision {
        PrecisionArg::F32 => f32_run(&Model::load(checkpoint)?),
        PrecisionArg::F64 => f64_run(&Model::load(checkpoint)?),
    }
}

fn eval_with<T: Scalar>(model: &Model<T>, data: &Path) -> Result<EvalResult> {
    evaluate(model, &load_dataset(data)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            train_dir,
            val_dir,
            epochs,
            seed,
            ablation,
            precision,
            width,
            checkpoint,
            log,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_file(&p)?,
                None => TrainConfig::default(),
            };
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
                cfg.set(k.trim(), v)?;
            }
            cfg.train_dir = train_dir.or(cfg.train_dir);
            cfg.val_dir = val_dir.or(cfg.val_dir);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.ablation = ablation.map(Into::into).or(cfg.ablation);
            cfg.precision = precision.map(Into::into).unwrap_or(cfg.precision);
            cfg.width = width.unwrap_or(cfg.width);
            cfg.checkpoint = checkpoint.unwrap_or(cfg.checkpoint);
            cfg.log = log.or(cfg.log);
            let report = train(&cfg, |r| println!("{}", serde_json::to_string(r).expect("serializable")))?;
            println!(
                "best epoch {} with validation MAE {:.4}; checkpoint {}",
                report.best_epoch,
                report.best_val_mae,
                report.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, data, precision, json } => {
            let result = with_model(&checkpoint, precision, |m| eval_with(m, &data), |m| eval_with(m, &data))?;
            print_eval(&result, json);
        }
        Command::Infer { checkpoint, image, output, upsample, precision } => {
            let map = with_model(
                &checkpoint,
                precision,
                |m| infer(m, &image, &output, upsample),
                |m| infer(m, &image, &output, upsample),
            )?;
            println!("{:.4}", map.count());
        }
        Command::Flops { height, width, ablation, width_multiplier, format } => {
            let config = ModelConfig { width_multiplier, ..ModelConfig::default() }.with_ablation(ablation.map(Into::into));
            let report = model_flops(&config, height, width)?;
            match format {
                ReportFormat::Table => print!("{}", report.to_table()),
                ReportFormat::Jsonl => print!("{}", report.to_json_lines()),
            }
        }
        Command::Synth { out, n, seed, min_count, max_count, height, width } => {
            let images = generate_synthetic(&SynthConfig { count_range: (min_count, max_count), height, width, n_images: n, seed })?;
            save_dataset(&out, &images)?;
            println!("wrote {} images to {}", images.len(), out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["icc", "flops", "512", "640", "--ablation", "no-inception"]).unwrap();
        assert!(matches!(cli.command, Command::Flops { height: 512, width: 640, ablation: Some(AblationArg::NoInception), .. }));
        let cli = Cli::try_parse_from(["icc", "train", "--precision", "64", "--width", "0.25", "--set", "crop=128"]).unwrap();
        assert!(matches!(cli.command, Command::Train { precision: Some(PrecisionArg::F64), .. }));
        assert!(Cli::try_parse_from(["icc", "train", "--precision", "16"]).is_err());
    }
}
