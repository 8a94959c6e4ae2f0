//! `ewastenet`: split a dataset, train, evaluate, predict and self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ewastenet::check::{run_checks, Corruption};
use ewastenet::config::RunConfig;
use ewastenet::data::synth::{BUNDLED_PER_CLASS, BUNDLED_SEED, BUNDLED_SIZE};
use ewastenet::data::{
    decode_image, load_entries, render_split_table, resize, run_background_hook, scan_dataset, split_dataset,
    write_synthetic_dataset, DatasetIndex, SampleSet, Split, SplitSpec,
};
use ewastenet::eval::{argmax, evaluate, predict_probabilities, render_summary, write_report};
use ewastenet::fsutil::write_atomic;
use ewastenet::model::{build_model, render_budget};
use ewastenet::train::{fit, load_checkpoint, Checkpoint, EpochRecord};
use ewastenet::Error;

const SEED_ENV: &str = "EWASTENET_SEED";
const CORRUPT_ENV: &str = "EWASTENET_CHECK_CORRUPT";

#[derive(Parser)]
#[command(name = "ewastenet", version, about = "Two-stream DeiT e-waste image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a stratified train/val/test assignment for a dataset.
    Split(SplitArgs),
    /// Train a model and write `final/` and `best/` checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on one split and write its reports.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Run the built-in gradient, architecture and metric checks.
    Check,
    /// Draw the synthetic eight-class dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset root with one directory per class.
    #[arg(long)]
    data: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_parser = parse_ratios)]
    ratios: Option<[f64; 3]>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the split JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and the resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// A checkpoint directory, or a training output directory (uses `best/`).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which part of the split to score (default from config: test).
    #[arg(long)]
    on: Option<Split>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = BUNDLED_PER_CLASS)]
    per_class: usize,
    #[arg(long, default_value_t = BUNDLED_SIZE)]
    size: usize,
    #[arg(long, default_value_t = BUNDLED_SEED)]
    seed: u64,
}

enum Failure {
    /// Bad flags, config, data layout or checkpoint: exit 2.
    Usage(String),
    /// The check suite found a failure: exit 1.
    Checks,
    /// Reading or writing files failed: exit 3.
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Image { .. } => Failure::Io(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("expected three comma-separated ratios, got {}", p.len()))
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Failure::Usage(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// The config file (or defaults) with the seed taken from the flag, then
/// `EWASTENET_SEED`, then the file.
fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed.or(env_seed()?) {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn read_split(path: &Path, index: &DatasetIndex) -> CliResult<SplitSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec = SplitSpec::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    spec.validate_against(index)?;
    Ok(spec)
}

fn load_split(index: &DatasetIndex, spec: &SplitSpec, split: Split, h: usize, w: usize) -> CliResult<SampleSet> {
    let entries = spec.entries(index, split);
    Ok(load_entries(index, &entries, h, w)?)
}

/// Scans `data`, running the configured background hook into `scratch` first.
fn prepare_index(cfg: &RunConfig, data: &Path, scratch: &Path) -> CliResult<DatasetIndex> {
    let index = scan_dataset(data)?;
    match &cfg.data.background_hook {
        Some(program) => {
            println!("removing backgrounds with {} into {}", program.display(), scratch.display());
            Ok(run_background_hook(program, &index, scratch)?)
        }
        None => Ok(index),
    }
}

fn locate_checkpoint(dir: &Path) -> CliResult<PathBuf> {
    if dir.join("manifest.json").is_file() {
        Ok(dir.to_path_buf())
    } else if dir.join("best").join("manifest.json").is_file() {
        Ok(dir.join("best"))
    } else {
        Err(Failure::Usage(format!("no checkpoint at {}", dir.display())))
    }
}

fn open_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    Ok(load_checkpoint(&locate_checkpoint(dir)?)?)
}

fn cmd_split(a: SplitArgs) -> CliResult {
    let cfg = resolve_config(a.config.as_deref(), a.seed)?;
    let ratios = a.ratios.unwrap_or(cfg.data.ratios);
    let index = scan_dataset(&a.data)?;
    let spec = split_dataset(&index, ratios, cfg.train.seed)?;
    write_atomic(&a.out, spec.to_json()?.as_bytes())?;
    print!("{}", render_split_table(&index, &spec));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn epoch_line(r: &EpochRecord, total: usize) -> String {
    let mut line = format!(
        "epoch {:>3}/{total}  steps {:>5}  train loss {:.4} acc {:.4}",
        r.epoch, r.steps, r.train_loss, r.train_accuracy
    );
    if let Some((loss, acc)) = r.val {
        line += &format!("  val loss {loss:.4} acc {acc:.4}");
    }
    if r.improved {
        line += "  *best";
    }
    line
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve_config(a.config.as_deref(), a.seed)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let index = prepare_index(&cfg, &a.data, &a.out.join("preprocessed"))?;
    let spec = read_split(&a.split, &index)?;
    let (h, w) = (cfg.model.image_h, cfg.model.image_w);
    let train = load_split(&index, &spec, Split::Train, h, w)?;
    let val = load_split(&index, &spec, Split::Val, h, w)?;
    if train.is_empty() {
        return Err(Failure::Usage("the split assigns no images to train".into()));
    }
    write_atomic(&a.out.join("config.json"), cfg.to_json()?.as_bytes())?;

    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    model.freeze_backbones(cfg.train.freeze_backbones);
    let (trainable, frozen) = model.params.count();
    println!("parameters: {trainable} trainable, {frozen} frozen");
    print!("{}", render_budget(&model.parameter_table()));
    println!(
        "training on {} images ({} validation) for {} epochs, seed {}",
        train.len(),
        val.len(),
        cfg.train.epochs,
        cfg.train.seed
    );
    let total = cfg.train.epochs;
    let outcome = fit(
        model,
        &index.classes,
        &train,
        Some(&val),
        &cfg.train,
        Some(&a.out),
        |r| println!("{}", epoch_line(r, total)),
    )?;
    println!(
        "best epoch {} written to {}; final epoch written to {}",
        outcome.best.epoch,
        a.out.join("best").display(),
        a.out.join("final").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let cfg = resolve_config(a.config.as_deref(), None)?;
    let ck = open_checkpoint(&a.ckpt)?;
    let index = prepare_index(&cfg, &a.data, &a.out.join("preprocessed"))?;
    if index.classes != ck.classes {
        return Err(Failure::Usage(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            index.classes, ck.classes
        )));
    }
    let spec = read_split(&a.split, &index)?;
    let split = a.on.unwrap_or(cfg.eval.split);
    let (h, w) = (ck.model.config.image_h, ck.model.config.image_w);
    let set = load_split(&index, &spec, split, h, w)?;
    if set.is_empty() {
        return Err(Failure::Usage(format!("the split assigns no images to {split}")));
    }
    let probs = predict_probabilities(&ck.model, &set, cfg.eval.batch_size)?;
    let report = evaluate(&probs, &set.labels, &ck.classes)?;
    write_report(&a.out, &report)?;
    println!("{split} split, checkpoint epoch {}", ck.epoch);
    print!("{}", render_summary(&report));
    println!("wrote report.json, confusion.csv, roc.csv to {}", a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let ck = open_checkpoint(&a.ckpt)?;
    let (h, w) = (ck.model.config.image_h, ck.model.config.image_w);
    let image = resize(&decode_image(&a.image)?, h, w)?;
    let set = SampleSet {
        images: vec![image],
        labels: vec![0],
        paths: vec![a.image.display().to_string()],
    };
    let probs = predict_probabilities(&ck.model, &set, 1)?.remove(0);
    let probabilities: serde_json::Map<String, serde_json::Value> =
        ck.classes.iter().zip(&probs).map(|(c, &p)| (c.clone(), serde_json::json!(p))).collect();
    let out = serde_json::json!({
        "class_name": ck.classes[argmax(&probs)],
        "probabilities": probabilities,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(Error::from)?);
    Ok(())
}

fn cmd_check() -> CliResult {
    let corrupt = match std::env::var(CORRUPT_ENV) {
        Ok(v) if !v.is_empty() => Some(v.parse::<Corruption>()?),
        _ => None,
    };
    let results = run_checks(corrupt);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Err(Failure::Checks)
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    write_synthetic_dataset(&a.out, a.per_class, a.size, a.seed)?;
    println!(
        "wrote {} images per class at {}x{} to {}",
        a.per_class,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Check => cmd_check(),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
