//! The `textcaps` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::data::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::idx::write_idx;
use crate::data::pgm::export_pgm;
use crate::data::{load_dataset, take_per_class, DatasetKind, LabeledImageSet, Split};
use crate::datagen::{generate_dataset, sharpen_decoders};
use crate::error::{Error, Result};
use crate::model::parse_list;
use crate::pipeline::{init_model, run_checkpoint, run_pipeline, GENERATED_IMAGES, GENERATED_LABELS};
use crate::tensor::{Element, Precision};
use crate::train::{evaluate, train, Ensemble, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "textcaps", version, about = "Capsule-network character recognition and data generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a classifier with decoders and save its snapshot ensemble.
    Train(TrainArgs),
    /// Report test accuracy and reconstruction PSNR of a checkpoint.
    Eval(EvalArgs),
    /// Write test images and their reconstructions as PGM files.
    Reconstruct(ReconstructArgs),
    /// Sharpen the decoders of a checkpoint's latest snapshot.
    RetrainDecoder(RetrainArgs),
    /// Generate a perturbed dataset from a checkpoint.
    Perturb(PerturbArgs),
    /// Train M1, sharpen, generate, then train and sharpen M2.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Directory holding the IDX files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Training samples kept per class, first in file order; 0 keeps all.
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Class count when the data uses fewer classes than its family.
    #[arg(long)]
    classes: Option<usize>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Independent runs with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    trials: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    /// Number of test images to write.
    #[arg(long, default_value_t = 64)]
    limit: usize,
}

#[derive(Debug, Args)]
struct RetrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the data directory recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Variance ranks, comma separated.
    #[arg(long, default_value = "0,1")]
    rank: String,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on failures.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::RetrainDecoder(a) => cmd_retrain(&a),
        Command::Perturb(a) => cmd_perturb(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(n) = self.samples_per_class {
            cfg.samples_per_class = n;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if self.classes.is_some() {
            cfg.classes = self.classes;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn kind(&self) -> Result<DatasetKind> {
        self.dataset.parse()
    }
}

/// One split of a dataset, relabelled to `classes` classes when given.
fn load_split(dir: &Path, kind: DatasetKind, split: Split, classes: Option<usize>) -> Result<LabeledImageSet> {
    let set = load_dataset(dir, kind, split)?;
    match classes {
        Some(m) if m != set.class_count() => set.with_class_count(m),
        _ => Ok(set),
    }
}

/// The training subset a run configuration selects.
fn training_set(dir: &Path, kind: DatasetKind, cfg: &RunConfig) -> Result<LabeledImageSet> {
    let full = load_split(dir, kind, Split::Train, cfg.classes)?;
    if cfg.samples_per_class == 0 {
        return Ok(full);
    }
    let (set, shortfalls) = take_per_class(&full, cfg.samples_per_class)?;
    for s in shortfalls {
        warn!("class {} has only {} of {} requested samples", s.class, s.available, s.requested);
    }
    Ok(set)
}

/// The test split when its files are present.
fn optional_test_set(dir: &Path, kind: DatasetKind, classes: Option<usize>) -> Result<Option<LabeledImageSet>> {
    let (images, labels) = kind.files(dir, Split::Test);
    if !images.exists() || !labels.exists() {
        warn!("no test split in {}, skipping evaluation", dir.display());
        return Ok(None);
    }
    load_split(dir, kind, Split::Test, classes).map(Some)
}

fn log_config(cfg: &RunConfig) {
    let map = cfg.to_map();
    let line: Vec<String> = map.iter().map(|(k, v)| format!("{k}={v}")).collect();
    info!("seed {} config {}", cfg.train.seed, line.join(" "));
}

fn run_extra(args: &RunArgs, kind: DatasetKind, cfg: &RunConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("dataset".to_string(), kind.as_str().to_string()),
        ("data_dir".to_string(), args.data.display().to_string()),
        ("samples_per_class".to_string(), cfg.samples_per_class.to_string()),
    ])
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let base = args.run.config()?;
    let kind = args.run.kind()?;
    let train_set = training_set(&args.run.data, kind, &base)?;
    let test_set = optional_test_set(&args.run.data, kind, base.classes)?;
    let mut accuracies = Vec::new();
    for trial in 0..args.trials {
        let mut cfg = base.clone();
        cfg.train.seed = base.train.seed + trial as u64;
        let out = if args.trials == 1 {
            args.out.clone()
        } else {
            trial_path(&args.out, trial)
        };
        log_config(&cfg);
        let extra = run_extra(&args.run, kind, &cfg);
        let acc = match cfg.train.precision {
            Precision::Single => train_one::<f32>(&cfg, &train_set, test_set.as_ref(), extra, &out)?,
            Precision::Double => train_one::<f64>(&cfg, &train_set, test_set.as_ref(), extra, &out)?,
        };
        accuracies.extend(acc);
    }
    if accuracies.len() > 1 {
        let (mean, std) = mean_std(&accuracies);
        println!("accuracy over {} trials: mean={mean} std={std}", accuracies.len());
    }
    Ok(())
}

/// `out` with `.trial<i>` inserted before the extension.
fn trial_path(out: &Path, trial: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.trial{trial}.{}", ext.to_string_lossy()),
        None => format!("{stem}.trial{trial}"),
    };
    out.with_file_name(name)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn train_one<T: Element>(
    cfg: &RunConfig,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    mut extra: BTreeMap<String, String>,
    out: &Path,
) -> Result<Option<f64>> {
    let mut model = init_model::<T>(cfg, train_set.class_count(), 0)?;
    let ensemble = train(&mut model, train_set, &cfg.train)?.ensemble;
    let mut accuracy = None;
    if let (Some(test), false) = (test_set, ensemble.is_empty()) {
        let e = evaluate(&ensemble, test, cfg.train.batch_size)?;
        println!("accuracy={} mean_psnr={}", e.accuracy, e.mean_psnr);
        extra.insert("accuracy".into(), e.accuracy.to_string());
        accuracy = Some(e.accuracy);
    }
    save_checkpoint(out, &run_checkpoint(&ensemble, cfg, extra)?)?;
    info!("saved {}", out.display());
    Ok(accuracy)
}

/// Checkpoint, its run configuration and its storage precision.
fn open_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig, Precision)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = RunConfig::from_map(&ckpt.config)?;
    let precision = match ckpt.metadata.extra.get("precision") {
        Some(p) => p.parse()?,
        None => cfg.train.precision,
    };
    log_config(&cfg);
    Ok((ckpt, cfg, precision))
}

fn recorded_kind(ckpt: &Checkpoint, flag: Option<&str>) -> Result<DatasetKind> {
    match flag.or(ckpt.metadata.extra.get("dataset").map(String::as_str)) {
        Some(k) => k.parse(),
        None => Ok(DatasetKind::Mnist),
    }
}

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::Single => $f::<f32>($($arg),*),
            Precision::Double => $f::<f64>($($arg),*),
        }
    };
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (ckpt, cfg, precision) = open_checkpoint(&args.model)?;
    let kind = recorded_kind(&ckpt, args.dataset.as_deref())?;
    with_precision!(precision, eval_one(&ckpt, &cfg, kind, &args.data))
}

fn eval_one<T: Element>(ckpt: &Checkpoint, cfg: &RunConfig, kind: DatasetKind, dir: &Path) -> Result<()> {
    let ensemble = Ensemble::<T>::from_checkpoint(ckpt)?;
    let classes = ensemble.latest()?.config().classes();
    let test = load_split(dir, kind, Split::Test, Some(classes))?;
    let e = evaluate(&ensemble, &test, cfg.train.batch_size)?;
    println!("accuracy={} mean_psnr={}", e.accuracy, e.mean_psnr);
    if let Some(recorded) = ckpt.metadata.extra.get("accuracy") {
        println!("recorded_accuracy={recorded}");
    }
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let (ckpt, cfg, precision) = open_checkpoint(&args.model)?;
    let kind = recorded_kind(&ckpt, args.dataset.as_deref())?;
    with_precision!(precision, reconstruct_one(&ckpt, &cfg, kind, args))
}

fn reconstruct_one<T: Element>(ckpt: &Checkpoint, cfg: &RunConfig, kind: DatasetKind, args: &ReconstructArgs) -> Result<()> {
    let ensemble = Ensemble::<T>::from_checkpoint(ckpt)?;
    let model = ensemble.latest()?;
    let test = load_split(&args.data, kind, Split::Test, Some(model.config().classes()))?;
    let n = args.limit.min(test.len());
    let subset = test.subset(&(0..n).collect::<Vec<_>>());
    let recons = model.reconstruct(&subset, cfg.train.batch_size)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let (h, w) = (subset.height(), subset.width());
    for (i, recon) in recons.data().chunks_exact(h * w).enumerate() {
        let stem = format!("{i:05}-label{}", subset.label(i));
        export_pgm(subset.image(i), h, w, args.out_dir.join(format!("{stem}-input.pgm")))?;
        export_pgm(recon, h, w, args.out_dir.join(format!("{stem}-recon.pgm")))?;
    }
    println!("wrote {n} image pairs to {}", args.out_dir.display());
    Ok(())
}

fn recorded_data_dir(ckpt: &Checkpoint, flag: Option<&Path>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None => ckpt
            .metadata
            .extra
            .get("data_dir")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("checkpoint records no data directory; pass --data".into())),
    }
}

fn cmd_retrain(args: &RetrainArgs) -> Result<()> {
    let (ckpt, mut cfg, precision) = open_checkpoint(&args.model)?;
    if let Some(e) = args.epochs {
        cfg.retrain_epochs = e;
    }
    let dir = recorded_data_dir(&ckpt, args.data.as_deref())?;
    let kind = recorded_kind(&ckpt, None)?;
    with_precision!(precision, retrain_one(&ckpt, &cfg, kind, &dir, &args.out))
}

fn retrain_one<T: Element>(ckpt: &Checkpoint, cfg: &RunConfig, kind: DatasetKind, dir: &Path, out: &Path) -> Result<()> {
    let mut ensemble = Ensemble::<T>::from_checkpoint(ckpt)?;
    let mut cfg = cfg.clone();
    cfg.classes = Some(ensemble.latest()?.config().classes());
    let set = training_set(dir, kind, &cfg)?;
    sharpen_decoders(ensemble.latest_mut()?, &set, &cfg.unsharp, &cfg.retrain_config())?;
    let mut extra = ckpt.metadata.extra.clone();
    extra.insert("decoders_retrained".into(), "true".into());
    save_checkpoint(out, &run_checkpoint(&ensemble, &cfg, extra)?)?;
    info!("saved {}", out.display());
    Ok(())
}

fn cmd_perturb(args: &PerturbArgs) -> Result<()> {
    let (ckpt, mut cfg, precision) = open_checkpoint(&args.model)?;
    cfg.ranks = parse_list("rank", &args.rank)?;
    cfg.per_class = args.per_class;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let kind = recorded_kind(&ckpt, None)?;
    with_precision!(precision, perturb_one(&ckpt, &cfg, kind, args))
}

fn perturb_one<T: Element>(ckpt: &Checkpoint, cfg: &RunConfig, kind: DatasetKind, args: &PerturbArgs) -> Result<()> {
    let ensemble = Ensemble::<T>::from_checkpoint(ckpt)?;
    let model = ensemble.latest()?;
    let mut cfg = cfg.clone();
    cfg.classes = Some(model.config().classes());
    let original = training_set(&args.data, kind, &cfg)?;
    let generated = generate_dataset(model, &original, &cfg.perturb_config())?;
    std::fs::create_dir_all(&args.out)?;
    write_idx(&generated, args.out.join(GENERATED_IMAGES), args.out.join(GENERATED_LABELS))?;
    println!("wrote {} generated images to {}", generated.len(), args.out.display());
    Ok(())
}

fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let cfg = args.run.config()?;
    let kind = args.run.kind()?;
    log_config(&cfg);
    let original = training_set(&args.run.data, kind, &cfg)?;
    let test = load_split(&args.run.data, kind, Split::Test, Some(original.class_count()))?;
    let extra = run_extra(&args.run, kind, &cfg);
    let report = with_precision!(cfg.train.precision, pipeline_one(&original, &test, &cfg, &extra, &args.out))?;
    print!("{report}");
    Ok(())
}

fn pipeline_one<T: Element>(
    original: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RunConfig,
    extra: &BTreeMap<String, String>,
    out: &Path,
) -> Result<String> {
    let run = run_pipeline::<T>(original, test, cfg)?;
    run.save(out, cfg, extra)?;
    Ok(run.report())
}
