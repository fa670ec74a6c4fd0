mod config;
mod render;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use mtt_core::data::{load_dataset, read_image, synth_generate, Sample, Split, SynthConfig, TtaVariant};
use mtt_core::diffcore::resize_bilinear;
use mtt_core::engine::{
    evaluate, load_checkpoint, predict, save_checkpoint, tta_predict, LogRow, MetricsReport, TrainConfig, Trainer,
};
use mtt_core::exec::Execution;
use mtt_core::gradsuite::{run_suite, SuiteOptions};
use serde_json::json;

use config::{ConfigSources, UsageError};

#[derive(Parser)]
#[command(name = "mtt", version, about = "Multi-task Transformer U-Net for lesion segmentation and classification")]
struct Cli {
    /// Run every batch on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of images written without a mask.
        #[arg(long, default_value_t = 0.4)]
        unlabeled_fraction: f64,
        /// Probability of hair strokes per image.
        #[arg(long, default_value_t = 0.25)]
        hair: f64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value = "synth-data")]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// JSON object of dotted configuration keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one configuration key, e.g. `--set loss.cls=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Loss composition preset 1 to 6.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
        ablation: Option<u8>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset scored every `eval_every` steps and at the end; defaults to the training set.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Average over flips, rotations and three scales.
        #[arg(long)]
        tta: bool,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every primitive and loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Export the mask, attention overlay and class probabilities for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
        #[arg(long)]
        tta: bool,
    },
}

/// Gradient check found a mismatch.
#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) failed", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if let Some(diag) = numeric_diagnostic(&e) {
                eprintln!("{diag}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain on one line; causes already quoted by their parent are skipped.
fn describe(err: &anyhow::Error) -> String {
    let mut text = err.to_string();
    for cause in err.chain().skip(1) {
        let part = cause.to_string();
        if !text.contains(&part) {
            text = format!("{text}: {part}");
        }
    }
    text
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<GradcheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<mtt_core::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

/// Names the step and loss term of a numeric failure during training.
fn numeric_diagnostic(err: &anyhow::Error) -> Option<String> {
    let core = err.chain().find_map(|c| c.downcast_ref::<mtt_core::Error>())?;
    let mtt_core::Error::Step { step, source } = core else { return None };
    if !source.is_numeric() {
        return None;
    }
    let term = match source.as_ref() {
        mtt_core::Error::LossTerm { term, .. } => format!("loss term `{term}`"),
        mtt_core::Error::NonFinite { op: "backward" } => "backward pass".to_string(),
        mtt_core::Error::NonFinite { op } => format!("forward pass (`{op}`)"),
        other => other.to_string(),
    };
    Some(format!("non-finite value at step {step} in {term}"))
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::Synth { count, size, seed, unlabeled_fraction, hair, split, out } => {
            let config =
                SynthConfig { count, size, seed, unlabeled_fraction, hair_probability: hair, split: split.into() };
            config.validate().map_err(|e| UsageError(e.to_string()))?;
            let manifest = synth_generate(&config, &out, exec)?;
            println!(
                "wrote {} images ({} with masks) to {}",
                manifest.len(),
                manifest.num_with_masks(),
                out.display()
            );
            Ok(())
        }
        Command::Train { data, out, config, overrides, ablation, iters, seed, eval_data } => {
            let sources = ConfigSources { file: config.as_deref(), ablation, iters, seed, overrides: &overrides };
            let config = config::resolve(&sources)?;
            train(config, &data, &out, eval_data.as_deref(), exec)
        }
        Command::Eval { checkpoint, data, tta, out } => {
            let model = load_checkpoint(&checkpoint)?.model;
            let samples = load_dataset(&data)?.load_samples(exec)?;
            let report = evaluate(&model, &samples, tta, exec)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                write_file(&path, &text)?;
            }
            println!("{text}");
            Ok(())
        }
        Command::Gradcheck { instances, seed, tol, out, inject_bug } => {
            if instances == 0 {
                bail!(UsageError("--instances must be positive".into()));
            }
            let report = run_suite(&SuiteOptions { instances, seed, tol, inject_fault: inject_bug })?;
            println!("{:<16} {:<10} {:>9} {:>12}  result", "check", "kind", "instances", "rel_err");
            for c in &report.checks {
                let kind = serde_json::to_value(c.kind)?;
                let verdict = if c.passed { "pass" } else { "FAIL" };
                println!("{:<16} {:<10} {:>9} {:>12.3e}  {verdict}", c.name, kind.as_str().unwrap_or(""), c.instances, c.rel_err);
            }
            if let Some(path) = out {
                write_file(&path, &serde_json::to_string_pretty(&report)?)?;
            }
            let failed = report.failures().count();
            if failed > 0 {
                return Err(GradcheckFailed(failed).into());
            }
            println!("all {} checks passed (tolerance {:e})", report.checks.len(), report.tol);
            Ok(())
        }
        Command::Predict { checkpoint, image, out, tta } => predict_image(&checkpoint, &image, &out, tta),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn train(config: TrainConfig, data: &Path, out: &Path, eval_data: Option<&Path>, exec: Execution) -> Result<()> {
    let samples = load_dataset(data)?.load_samples(exec)?;
    let eval_samples: Option<Vec<Sample>> = match eval_data {
        Some(dir) => Some(load_dataset(dir)?.load_samples(exec)?),
        None => None,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.json"), &serde_json::to_string_pretty(&config::to_flat(&config))?)?;

    let mut log = BufWriter::new(File::create(out.join("loss.csv"))?);
    writeln!(log, "{}", LogRow::COLUMNS.join(","))?;
    let mut trainer = Trainer::new(config.clone(), &samples, exec)?;
    let scored = eval_samples.as_deref().unwrap_or(&samples);
    let every = config.eval_every;
    let progress = (config.total_iters / 20).max(1);
    info!("training {} steps on {} images", config.total_iters, samples.len());

    let mut write_error = None;
    trainer.run(|row, t| {
        if let Err(e) = writeln!(log, "{}", row.csv_fields().join(",")) {
            write_error.get_or_insert(anyhow::Error::from(e));
        }
        let done = row.step + 1;
        if done % progress == 0 {
            info!("step {done}/{}: loss {:.4}", config.total_iters, row.report.total());
        }
        if every > 0 && done % every == 0 {
            let report = evaluate(t.model(), scored, false, exec)?;
            if let Err(e) = write_report(&out.join(format!("metrics_{done:06}.json")), &report) {
                write_error.get_or_insert(e);
            }
        }
        Ok(())
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    log.flush()?;

    let steps = trainer.step_index();
    let (model, optimizer) = trainer.into_parts();
    let checkpoint = out.join("checkpoint.mttu");
    save_checkpoint(&checkpoint, &model, Some(&optimizer), config.seed, steps)?;
    if every > 0 || eval_data.is_some() {
        let report = evaluate(&model, scored, false, exec)?;
        write_report(&out.join("metrics.json"), &report)?;
    }
    println!("wrote {}", checkpoint.display());
    Ok(())
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(report)?)
}

fn predict_image(checkpoint: &Path, image_path: &Path, out: &Path, tta: bool) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let size = model.config().input_size;
    if model.config().in_channels != 3 {
        bail!(UsageError(format!("checkpoint expects {} input channels, images are RGB", model.config().in_channels)));
    }
    let original = read_image(image_path)?;
    let (h, w) = (original.shape()[1], original.shape()[2]);
    let input = if (h, w) == (size, size) { original.clone() } else { resize_bilinear(&original, size, size)? };
    let prediction = if tta { tta_predict(&model, &input, &TtaVariant::all(size))? } else { predict(&model, &input)? };

    let foreground = resize_bilinear(&prediction.foreground.clone().reshape(&[1, size, size])?, h, w)?.reshape(&[h, w])?;
    let mask = mtt_core::levelset::BinaryMask::from_probabilities(h, w, foreground.data(), 0.5)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    mtt_core::data::mask_to_gray(&mask).save(out.join("mask.png"))?;
    render::attention_overlay(&original, &prediction.cls_attention, prediction.grid)?.save(out.join("attention.png"))?;

    let attention_sum: f64 = prediction.cls_attention.data().iter().sum();
    let summary = json!({
        "image": image_path,
        "tta": tta,
        "class_probs": prediction.class_probs,
        "predicted_class": prediction.predicted_class(),
        "grid": [prediction.grid.0, prediction.grid.1],
        "attention": prediction.cls_attention.data(),
        "attention_sum": attention_sum,
    });
    write_file(&out.join("prediction.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!("wrote mask.png, attention.png and prediction.json to {}", out.display());
    Ok(())
}
