//! Command-line driver: toy data generation, sampler pretraining, training,
//! evaluation and single-image scoring.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use csiqa_core::csm::{pretrain_csm, PretrainConfig, SamplingMatrix, CSNET_WIDTH};
use csiqa_core::head::weight_map;
use csiqa_core::optim::AdamConfig;
use csiqa_core::synth::{synthetic_corpus, synthetic_dataset, SynthConfig};
use csiqa_core::train::{evaluate, image_rng, random_crop, select, split_dataset, TrainConfig, Trainer};
use csiqa_core::{seeded_rng, Image, Model, ModelConfig, Variant};

use crate::checkpoint::{self, Checkpoint, CsmState, TrainingState};
use crate::config::{parse_ratio_mode, RunConfig, Settings};
use crate::error::{Error, Result};
use crate::{manifest, pnm};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "CSIQA_SEED";

#[derive(Debug, Parser)]
#[command(name = "csiqa", version, about = "No-reference image quality assessment from compressed measurements")]
pub struct Cli {
    /// Settings file of `key = value` lines (`#` comments); flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic toy dataset (images plus manifest) or clean corpus.
    Synth(SynthArgs),
    /// Pretrain the sampling matrix with a reconstruction network.
    Pretrain(PretrainArgs),
    /// Train a quality model on a manifest.
    Train(Box<TrainArgs>),
    /// Score a manifest and report PLCC/SRCC.
    Eval(EvalArgs),
    /// Score one image, optionally writing its token weight map.
    Score(ScoreArgs),
    /// Write only the sampling matrix of a checkpoint.
    ExportPhi(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of images distorted by blur instead of noise.
    #[arg(long, default_value_t = 0.0)]
    pub blur_fraction: f64,
    /// Write undistorted patterns only (a pretraining corpus), no manifest.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory of PGM/PPM images.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub block: Option<usize>,
    /// Hidden channels of the refinement convolutions.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep a random Gaussian sampling matrix fixed and train only the
    /// reconstructor (a baseline for comparison).
    #[arg(long)]
    pub frozen_random: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// `cl-iqa` or `cs-iqa`.
    #[arg(long)]
    pub variant: Option<String>,
    /// A fixed ratio such as `0.1`, or `r` for arbitrary-ratio training over
    /// 0.1, 0.2, 0.5 and 1.0.
    #[arg(long)]
    pub ratio: Option<String>,
    /// Initialize the sampling matrix from this checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub csm: Option<PathBuf>,
    /// Continue the run stored in this checkpoint.
    #[arg(long, value_name = "CKPT", conflicts_with = "csm")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop once this many optimizer steps have been taken in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the train/validation/test split (defaults to the seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub alpha_learnable: Option<bool>,
    #[arg(long)]
    pub sstm_count: Option<usize>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// Crops averaged per validation image.
    #[arg(long)]
    pub eval_crops: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    /// The held-out test part of the seeded split used in training.
    Test,
    /// Every manifest row.
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Evaluation ratio; defaults to the training ratio (the largest one for
    /// arbitrary-ratio models).
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub crops: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Write per-image predictions as CSV.
    #[arg(long, value_name = "CSV")]
    pub report: Option<PathBuf>,
    /// Use the final parameters instead of the best-on-validation ones.
    #[arg(long)]
    pub last: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub crops: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the normalized token weights of the first crop as a PGM with
    /// one pixel per block.
    #[arg(long, value_name = "OUT.pgm")]
    pub weight_map: Option<PathBuf>,
    #[arg(long)]
    pub last: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Output streams of a command: results on `out`, run headers and progress
/// on `log`.
pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub log: &'a mut dyn Write,
}

fn emit(w: &mut dyn Write, text: std::fmt::Arguments) {
    // Console output failures (e.g. a closed pipe) do not abort a run.
    let _ = w.write_fmt(text);
    let _ = w.write_all(b"\n");
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => { emit($w, format_args!($($arg)*)) };
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Flag, then settings file, then `CSIQA_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, settings: &Settings) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = settings.get("seed")? {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(0))
}

fn header(log: &mut dyn Write, command: &str, rows: &[(&str, String)]) {
    say!(log, "# csiqa {command}");
    for (k, v) in rows {
        say!(log, "#   {k} = {v}");
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Runs a parsed command.
pub fn run(cli: Cli, io: &mut Io) -> Result<()> {
    let settings = match &cli.config {
        Some(p) => Settings::read(p)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(a, &settings, io),
        Command::Pretrain(a) => pretrain(a, &settings, io),
        Command::Train(a) => train(*a, &settings, io),
        Command::Eval(a) => eval(a, &settings, io),
        Command::Score(a) => score(a, &settings, io),
        Command::ExportPhi(a) => export_phi(a, io),
    }
}

/// Parses `args` and runs the command, printing errors to `io.log`.
/// Returns the process exit status.
pub fn main_with<I, T>(args: I, io: &mut Io) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { io.out } else { io.log };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match run(cli, io) {
        Ok(()) => 0,
        Err(e) => {
            say!(io.log, "error: {e}");
            e.exit_code()
        }
    }
}

fn synth(a: SynthArgs, settings: &Settings, io: &mut Io) -> Result<()> {
    let seed = resolve_seed(a.seed, settings)?;
    if a.count == 0 || a.size == 0 {
        return Err(usage("--count and --size must be positive"));
    }
    if !(0.0..=1.0).contains(&a.blur_fraction) {
        return Err(usage("--blur-fraction must lie in [0, 1]"));
    }
    header(
        io.log,
        "synth",
        &[
            ("out", path_str(&a.out)),
            ("count", a.count.to_string()),
            ("size", a.size.to_string()),
            ("seed", seed.to_string()),
            ("blur_fraction", a.blur_fraction.to_string()),
            ("clean", a.clean.to_string()),
        ],
    );
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let name = |i: usize| a.out.join(format!("img_{i:03}.pgm"));
    if a.clean {
        for (i, img) in synthetic_corpus(a.count, a.size, seed).iter().enumerate() {
            pnm::write(&name(i), img)?;
        }
        say!(io.out, "wrote {} images to {}", a.count, a.out.display());
        return Ok(());
    }
    let cfg = SynthConfig { size: a.size, blur_fraction: a.blur_fraction };
    let mut rows = Vec::with_capacity(a.count);
    for (i, s) in synthetic_dataset(a.count, &cfg, seed).iter().enumerate() {
        let path = name(i);
        pnm::write(&path, &s.image)?;
        rows.push((path_str(&path), s.mos));
    }
    let manifest_path = a.out.join("manifest.csv");
    let text = manifest::render(&rows)?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    say!(io.out, "wrote {} images and {}", a.count, manifest_path.display());
    Ok(())
}

fn read_corpus(dir: &Path) -> Result<Vec<Image>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm")) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("{}: no .pgm or .ppm images", dir.display())));
    }
    paths.iter().map(|p| pnm::read_luma(p)).collect()
}

fn pretrain(a: PretrainArgs, s: &Settings, io: &mut Io) -> Result<()> {
    let ratio = a.ratio.or(s.get("ratio")?).ok_or_else(|| usage("--ratio is required"))?;
    csiqa_core::csm::check_ratio(ratio)?;
    let defaults = PretrainConfig::default();
    let cfg = PretrainConfig {
        ratio,
        epochs: a.epochs.or(s.get("epochs")?).unwrap_or(defaults.epochs),
        lr: a.lr.or(s.get("lr")?).unwrap_or(defaults.lr),
        width: a.width.or(s.get("width")?).unwrap_or(CSNET_WIDTH),
        train_phi: !a.frozen_random,
    };
    let block = a.block.or(s.get("block")?).unwrap_or(ModelConfig::default().block);
    let seed = resolve_seed(a.seed, s)?;
    if block == 0 || cfg.width == 0 {
        return Err(usage("block size and width must be positive"));
    }
    header(
        io.log,
        "pretrain",
        &[
            ("corpus", path_str(&a.corpus)),
            ("out", path_str(&a.out)),
            ("ratio", ratio.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("lr", cfg.lr.to_string()),
            ("block", block.to_string()),
            ("width", cfg.width.to_string()),
            ("seed", seed.to_string()),
            ("sampling", if a.frozen_random { "frozen random gaussian" } else { "learned" }.to_string()),
        ],
    );
    let corpus = read_corpus(&a.corpus)?;
    say!(io.log, "# corpus: {} images", corpus.len());
    let mut rng = seeded_rng(seed);
    let phi = if a.frozen_random {
        SamplingMatrix::random_gaussian(block, &mut rng)
    } else {
        SamplingMatrix::orthogonal_gaussian(block, &mut rng)
    };
    let outcome = pretrain_csm(&corpus, phi, &cfg, &mut rng)?;
    let every = (cfg.epochs / 20).max(1);
    for (i, l) in outcome.losses.iter().enumerate() {
        if i % every == 0 || i + 1 == outcome.losses.len() {
            say!(io.log, "epoch {i:>5}  mse {l:.6e}");
        }
    }
    let (first, last) = (outcome.losses[0], *outcome.losses.last().unwrap());
    let state = CsmState {
        ratio,
        width: cfg.width,
        seed,
        phi: outcome.phi,
        reconstructor: outcome.reconstructor,
        losses: outcome.losses,
    };
    checkpoint::save(&a.out, &Checkpoint::Csm(Box::new(state)))?;
    say!(io.out, "initial MSE={first:.6e} final MSE={last:.6e}");
    Ok(())
}

fn resolve_run_config(a: &TrainArgs, s: &Settings) -> Result<RunConfig> {
    let d = ModelConfig::default();
    let t = TrainConfig::default();
    let variant = match a.variant.clone().or_else(|| s.raw("variant").map(String::from)) {
        None => d.variant,
        Some(v) => {
            Variant::parse(&v).ok_or_else(|| usage(format!("unknown variant `{v}` (expected cl-iqa or cs-iqa)")))?
        }
    };
    let ratio_text =
        a.ratio.clone().or_else(|| s.raw("ratio").map(String::from)).ok_or_else(|| usage("--ratio is required"))?;
    let ratio_mode = parse_ratio_mode(&ratio_text).ok_or_else(|| usage(format!("invalid ratio `{ratio_text}`")))?;
    let seed = resolve_seed(a.seed, s)?;
    let model = ModelConfig {
        variant,
        block: a.block.or(s.get("block")?).unwrap_or(d.block),
        embed_dim: a.embed_dim.or(s.get("embed_dim")?).unwrap_or(d.embed_dim),
        depth: a.depth.or(s.get("depth")?).unwrap_or(d.depth),
        heads: a.heads.or(s.get("heads")?).unwrap_or(d.heads),
        window: a.window.or(s.get("window")?).unwrap_or(d.window),
        alpha: a.alpha.or(s.get("alpha")?).unwrap_or(d.alpha),
        alpha_learnable: a.alpha_learnable.or(s.get("alpha_learnable")?).unwrap_or(d.alpha_learnable),
        sstm_count: a.sstm_count.or(s.get("sstm_count")?).unwrap_or(d.sstm_count),
        ratio_mode,
        crop_size: a.crop_size.or(s.get("crop_size")?).unwrap_or(d.crop_size),
        seed,
    };
    let train = TrainConfig {
        batch_size: a.batch_size.or(s.get("batch_size")?).unwrap_or(t.batch_size),
        adam: AdamConfig {
            lr: a.lr.or(s.get("lr")?).unwrap_or(t.adam.lr),
            weight_decay: a.weight_decay.or(s.get("weight_decay")?).unwrap_or(t.adam.weight_decay),
            beta1: s.get("beta1")?.unwrap_or(t.adam.beta1),
            beta2: s.get("beta2")?.unwrap_or(t.adam.beta2),
            eps: s.get("adam_eps")?.unwrap_or(t.adam.eps),
        },
        epochs: a.epochs.or(s.get("epochs")?).unwrap_or(t.epochs),
        eval_crops: a.eval_crops.or(s.get("eval_crops")?).unwrap_or(t.eval_crops),
    };
    if train.batch_size == 0 || train.eval_crops == 0 {
        return Err(usage("batch size and evaluation crops must be positive"));
    }
    let split_seed = a.split_seed.or(s.get("split_seed")?).unwrap_or(seed);
    model.validate().map_err(|e| usage(format!("invalid model configuration: {e}")))?;
    Ok(RunConfig { model, train, split_seed })
}

fn reject_on_resume(a: &TrainArgs) -> Result<()> {
    let set = [
        ("--variant", a.variant.is_some()),
        ("--ratio", a.ratio.is_some()),
        ("--lr", a.lr.is_some()),
        ("--weight-decay", a.weight_decay.is_some()),
        ("--batch-size", a.batch_size.is_some()),
        ("--seed", a.seed.is_some()),
        ("--split-seed", a.split_seed.is_some()),
        ("--block", a.block.is_some()),
        ("--embed-dim", a.embed_dim.is_some()),
        ("--depth", a.depth.is_some()),
        ("--heads", a.heads.is_some()),
        ("--window", a.window.is_some()),
        ("--alpha", a.alpha.is_some()),
        ("--alpha-learnable", a.alpha_learnable.is_some()),
        ("--sstm-count", a.sstm_count.is_some()),
        ("--crop-size", a.crop_size.is_some()),
        ("--eval-crops", a.eval_crops.is_some()),
    ];
    let bad: Vec<&str> = set.iter().filter(|(_, on)| *on).map(|(n, _)| *n).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(usage(format!("{} cannot change when resuming; the checkpoint fixes the configuration", bad.join(", "))))
    }
}

fn train(a: TrainArgs, s: &Settings, io: &mut Io) -> Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            reject_on_resume(&a)?;
            match checkpoint::load(path)? {
                Checkpoint::Training(t) => {
                    let mut t = *t;
                    if let Some(e) = a.epochs {
                        t.config.train.epochs = e;
                        t.trainer.cfg.epochs = e;
                    }
                    t
                }
                Checkpoint::Csm(_) => {
                    return Err(usage(format!("{}: holds a pretrained sampler, not a training run", path.display())))
                }
            }
        }
        None => {
            let config = resolve_run_config(&a, s)?;
            let model = Model::new(config.model.clone())?;
            TrainingState { trainer: Trainer::new(model, config.train), config }
        }
    };
    let mut rows = vec![("manifest", path_str(&a.manifest)), ("out", path_str(&a.out))];
    if let Some(p) = &a.resume {
        rows.push(("resume", path_str(p)));
    }
    if let Some(p) = &a.csm {
        rows.push(("csm", path_str(p)));
    }
    if let Some(m) = a.max_steps {
        rows.push(("max_steps", m.to_string()));
    }
    let text = state.config.to_text();
    let cfg_rows: Vec<(&str, String)> =
        text.lines().filter_map(|l| l.split_once(" = ")).map(|(k, v)| (k, v.to_string())).collect();
    rows.extend(cfg_rows);
    header(io.log, "train", &rows);

    if let Some(p) = &a.csm {
        let phi = checkpoint::load_phi(p)?;
        state.trainer.model.set_phi(&phi).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        say!(io.log, "# sampling matrix initialized from {}", p.display());
    }

    let (_, samples) = manifest::load_samples(&a.manifest)?;
    let split = split_dataset(samples.len(), state.config.split_seed);
    let (train_set, val_set) = (select(&samples, &split.train), select(&samples, &split.val));
    say!(io.log, "# split: {} train, {} validation, {} test", train_set.len(), val_set.len(), split.test.len());
    if val_set.len() < 2 {
        say!(io.log, "# warning: fewer than two validation images; validation metrics are undefined");
    }

    let t = &mut state.trainer;
    let epochs = t.cfg.epochs as u64;
    while t.epoch < epochs && a.max_steps.is_none_or(|m| t.step < m) {
        t.train_step(&train_set)?;
        if t.epoch_complete() {
            let r = t.end_epoch(&val_set)?;
            say!(
                io.log,
                "epoch {:>4}  step {:>6}  loss {:.6e}  val SRCC {:.4}  val PLCC {:.4}",
                r.epoch,
                t.step,
                r.mean_loss,
                r.val_srcc,
                r.val_plcc
            );
        }
    }
    checkpoint::save(&a.out, &Checkpoint::Training(Box::new(state.clone())))?;
    match &state.trainer.best {
        Some(b) => say!(io.out, "best val SRCC={:.6} epoch={} steps={}", b.val_srcc, b.epoch, state.trainer.step),
        None => say!(io.out, "no completed epoch; steps={}", state.trainer.step),
    }
    Ok(())
}

/// The model stored in a training checkpoint: best-on-validation
/// parameters unless `last` is set.
fn load_model(path: &Path, last: bool) -> Result<(Model, RunConfig)> {
    match checkpoint::load(path)? {
        Checkpoint::Training(t) => {
            let model = if last { t.trainer.model.clone() } else { t.trainer.best_model() };
            Ok((model, t.config))
        }
        Checkpoint::Csm(_) => {
            Err(usage(format!("{}: holds a pretrained sampler, not a quality model", path.display())))
        }
    }
}

fn eval_ratio(model: &Model, flag: Option<f64>, s: &Settings) -> Result<f64> {
    let ratio = match flag {
        Some(r) => r,
        None => match s.raw("ratio") {
            Some(_) => s.get("ratio")?.ok_or_else(|| usage("ratio"))?,
            None => model.cfg.ratio_mode.default_eval_ratio(),
        },
    };
    model.cfg.check_ratio(ratio).map_err(|e| usage(format!("cannot evaluate at ratio {ratio}: {e}")))?;
    Ok(ratio)
}

fn eval(a: EvalArgs, s: &Settings, io: &mut Io) -> Result<()> {
    let (model, config) = load_model(&a.ckpt, a.last)?;
    let ratio = eval_ratio(&model, a.ratio, s)?;
    let crops = a.crops.or(s.get("crops")?).unwrap_or(5);
    if crops == 0 {
        return Err(usage("--crops must be positive"));
    }
    let seed = resolve_seed(a.seed, s)?;
    header(
        io.log,
        "eval",
        &[
            ("manifest", path_str(&a.manifest)),
            ("ckpt", path_str(&a.ckpt)),
            ("variant", model.cfg.variant.as_str().into()),
            ("ratio", ratio.to_string()),
            ("crops", crops.to_string()),
            ("seed", seed.to_string()),
            ("split", format!("{:?}", a.split).to_lowercase()),
            ("split_seed", config.split_seed.to_string()),
            ("parameters", if a.last { "last" } else { "best" }.into()),
        ],
    );
    let (entries, samples) = manifest::load_samples(&a.manifest)?;
    let idx: Vec<usize> = match a.split {
        SplitChoice::All => (0..samples.len()).collect(),
        SplitChoice::Test => split_dataset(samples.len(), config.split_seed).test,
    };
    let chosen = select(&samples, &idx);
    say!(io.log, "# scoring {} images", chosen.len());
    let result = evaluate(&model, &chosen, ratio, crops, seed)?;
    if let Some(report) = &a.report {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let to_err = |e: csv::Error| usage(format!("cannot write report: {e}"));
        w.write_record(["path", "mos", "prediction"]).map_err(to_err)?;
        for (&i, p) in idx.iter().zip(&result.predictions) {
            w.write_record([path_str(&entries[i].path), entries[i].mos.to_string(), p.to_string()]).map_err(to_err)?;
        }
        let bytes = w.into_inner().map_err(|e| usage(format!("cannot write report: {e}")))?;
        std::fs::write(report, bytes).map_err(|e| Error::io(report, e))?;
    }
    say!(io.out, "PLCC={:.6} SRCC={:.6}", result.plcc, result.srcc);
    Ok(())
}

fn score(a: ScoreArgs, s: &Settings, io: &mut Io) -> Result<()> {
    let (model, _) = load_model(&a.ckpt, a.last)?;
    let ratio = eval_ratio(&model, a.ratio, s)?;
    let crops = a.crops.or(s.get("crops")?).unwrap_or(5);
    if crops == 0 {
        return Err(usage("--crops must be positive"));
    }
    let seed = resolve_seed(a.seed, s)?;
    let mut rows = vec![
        ("image", path_str(&a.image)),
        ("ckpt", path_str(&a.ckpt)),
        ("variant", model.cfg.variant.as_str().into()),
        ("ratio", ratio.to_string()),
        ("crops", crops.to_string()),
        ("seed", seed.to_string()),
    ];
    if let Some(p) = &a.weight_map {
        rows.push(("weight_map", path_str(p)));
    }
    header(io.log, "score", &rows);
    let img = pnm::read_luma(&a.image)?;
    // Same crop stream as evaluation of a single image.
    let mut rng = image_rng(seed, 0);
    let mut total = 0.0;
    let mut first = None;
    for _ in 0..crops {
        let crop = random_crop(&img, model.cfg.crop_size, &mut rng)?;
        let p = model.forward(&crop, ratio)?;
        total += p.score;
        first.get_or_insert(p);
    }
    if let (Some(path), Some(p)) = (&a.weight_map, first) {
        let map = weight_map(&p.token_weights, &p.grid)?;
        let img = Image::gray(p.grid.blocks_h, p.grid.blocks_w, map)?;
        pnm::write(path, &img)?;
    }
    say!(io.out, "{}", total / crops as f64);
    Ok(())
}

fn export_phi(a: ExportArgs, io: &mut Io) -> Result<()> {
    header(io.log, "export-phi", &[("ckpt", path_str(&a.ckpt)), ("out", path_str(&a.out))]);
    let ck = checkpoint::load(&a.ckpt)?;
    checkpoint::write_bytes(&a.out, &ck.phi_bytes())?;
    say!(
        io.out,
        "wrote sampling matrix ({}x{}) to {}",
        ck.phi().phi.shape()[0],
        ck.phi().phi.shape()[1],
        a.out.display()
    );
    Ok(())
}
