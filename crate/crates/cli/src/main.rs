//! Command-line surface: train, stylize, retrain, eval, baseline.
//!
//! Exit codes: 0 success, 2 validation/usage, 3 numeric divergence, 4 I/O.
//! Every run prints its resolved effective configuration as one JSON line
//! before doing any work, so runs are reproducible from logs alone.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use cyclestyle::backbone::{load_backbone, Backbone, BackboneSource};
use cyclestyle::error::Error;
use cyclestyle::image_io::{ImageBuffer, PngDepth};
use cyclestyle::inference::{stylize, Direction, StylizeRequest};
use cyclestyle::losses::{baseline_direct_transfer_traced, LossWeights};
use cyclestyle::metrics::evaluate;
use cyclestyle::regions::{load_masks, LabelMap, Palette, RegionMaskSet};
use cyclestyle::stylenet::NetConfig;
use cyclestyle::tensor::set_serial;
use cyclestyle::trainer::{
    retrain_for_new_style, train_pair, Checkpoint, OptimizerSpec, TrainConfig, TrainMode,
    TrainOptions,
};

const BACKBONE_ENV: &str = "CYCLESTYLE_BACKBONE";
const DEFAULT_BACKBONE: &str = "random:0";

#[derive(Parser)]
#[command(
    name = "cyclestyle",
    version,
    about = "Photo-to-photo style transfer trained on a single image pair"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a stylization network pair on two photos.
    Train(TrainArgs),
    /// Apply a trained checkpoint to an image.
    Stylize(StylizeArgs),
    /// Adapt a trained checkpoint to a new photo pair by retraining only
    /// the instance-normalization parameters.
    Retrain(RetrainArgs),
    /// Measure a checkpoint's consistency and stylization metrics.
    Eval(EvalArgs),
    /// Direct optimization over pixels (no networks): the slow reference
    /// method this project replaces.
    Baseline(BaselineArgs),
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Backbone weights: a tensor-archive path or `random:SEED`.
    /// Defaults to $CYCLESTYLE_BACKBONE, then `random:0`.
    #[arg(long)]
    backbone: Option<String>,
    /// TOML or JSON file with defaults; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Force fully serial execution.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Photo carrying style A.
    #[arg(long = "image-a")]
    image_a: PathBuf,
    /// Photo carrying style B.
    #[arg(long = "image-b")]
    image_b: PathBuf,
    /// Semantic mask for photo A (requires --mask-b).
    #[arg(long = "mask-a", requires = "mask_b")]
    mask_a: Option<PathBuf>,
    /// Semantic mask for photo B (requires --mask-a).
    #[arg(long = "mask-b", requires = "mask_a")]
    mask_b: Option<PathBuf>,
    /// Optional palette JSON mapping "#RRGGBB" to region labels.
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Resume training from an existing checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
    #[arg(long = "lambda-s")]
    lambda_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `full` or `instance-norm-only` (the latter needs --ckpt).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// JSON-lines training log: a path, or `-` for stdout.
    #[arg(long)]
    log: Option<String>,
    #[arg(long = "log-every")]
    log_every: Option<usize>,
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "instance-norm-only", alias = "instance_norm_only")]
    InstanceNormOnly,
}

impl ModeArg {
    fn to_mode(self) -> TrainMode {
        match self {
            ModeArg::Full => TrainMode::Full,
            ModeArg::InstanceNormOnly => TrainMode::InstanceNormOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    #[value(name = "to_a", alias = "to-a")]
    ToA,
    #[value(name = "to_b", alias = "to-b")]
    ToB,
}

#[derive(Args)]
struct StylizeArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Image to stylize.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    direction: DirectionArg,
    /// Region mask for the input (required for multi-region checkpoints).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
    /// Output bit depth: 8 or 16.
    #[arg(long, default_value_t = 8)]
    depth: u8,
}

#[derive(Args)]
struct RetrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Base checkpoint whose convolutional trunk is kept frozen.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "image-a")]
    image_a: PathBuf,
    #[arg(long = "image-b")]
    image_b: PathBuf,
    #[arg(long = "mask-a", requires = "mask_b")]
    mask_a: Option<PathBuf>,
    #[arg(long = "mask-b", requires = "mask_a")]
    mask_b: Option<PathBuf>,
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
    #[arg(long = "lambda-s")]
    lambda_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log: Option<String>,
    #[arg(long = "log-every")]
    log_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    ckpt: PathBuf,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Style photo.
    #[arg(long = "image-a")]
    image_a: PathBuf,
    /// Content photo (also the starting iterate).
    #[arg(long = "image-b")]
    image_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
    #[arg(long = "lambda-s")]
    lambda_s: Option<f64>,
}

/// Optional file-based defaults; every explicit flag overrides its entry.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    steps: Option<usize>,
    lr: Option<f64>,
    lambda_c: Option<f64>,
    lambda_s: Option<f64>,
    seed: Option<u64>,
    mode: Option<String>,
    backbone: Option<String>,
    log_every: Option<usize>,
    base_channels: Option<usize>,
    serial: Option<bool>,
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig, Error> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("config {path:?}: {e}")))
    } else {
        toml::from_str(&text).map_err(|e| Error::Schema(format!("config {path:?}: {e}")))
    }
}

fn resolve_backbone(
    flag: Option<&str>,
    file: &FileConfig,
) -> Result<(String, Backbone<f32>), Error> {
    let spec = flag
        .map(str::to_string)
        .or_else(|| file.backbone.clone())
        .or_else(|| std::env::var(BACKBONE_ENV).ok())
        .unwrap_or_else(|| DEFAULT_BACKBONE.to_string());
    let backbone = load_backbone(&BackboneSource::parse(&spec)?)?;
    Ok((spec, backbone))
}

fn load_mask_set(
    mask_a: Option<&Path>,
    mask_b: Option<&Path>,
    palette: Option<&Path>,
    image_a: &ImageBuffer,
    image_b: &ImageBuffer,
) -> Result<RegionMaskSet, Error> {
    match (mask_a, mask_b) {
        (Some(a), Some(b)) => {
            let palette = palette
                .map(|p| -> Result<Palette, Error> {
                    Palette::from_json(&std::fs::read_to_string(p)?)
                })
                .transpose()?;
            load_masks(
                a,
                b,
                palette.as_ref(),
                (image_a.height(), image_a.width()),
                (image_b.height(), image_b.width()),
            )
        }
        (None, None) => Ok(RegionMaskSet::single_region(
            (image_a.height(), image_a.width()),
            (image_b.height(), image_b.width()),
        )),
        _ => Err(Error::validation(
            "masks must be given for both images or neither",
        )),
    }
}

fn open_log(spec: Option<&str>) -> Result<Option<Box<dyn Write>>, Error> {
    match spec {
        None => Ok(None),
        Some("-") => Ok(Some(Box::new(std::io::stdout()))),
        Some(path) => Ok(Some(Box::new(std::fs::File::create(path)?))),
    }
}

fn print_effective(command: &str, fields: serde_json::Value) {
    let mut obj = serde_json::json!({ "command": command });
    if let (Some(dst), Some(src)) = (obj.as_object_mut(), fields.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    println!("config: {obj}");
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let file = read_file_config(args.common.config.as_deref())?;
    let serial = args.common.serial || file.serial.unwrap_or(false);
    set_serial(serial);
    let (backbone_spec, backbone) = resolve_backbone(args.common.backbone.as_deref(), &file)?;

    let file_mode = match file.mode.as_deref() {
        Some("full") => Some(TrainMode::Full),
        Some("instance_norm_only") | Some("instance-norm-only") => {
            Some(TrainMode::InstanceNormOnly)
        }
        _ => None,
    };
    let mode = args
        .mode
        .map(ModeArg::to_mode)
        .or(file_mode)
        .unwrap_or(TrainMode::Full);

    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_c: args.lambda_c.or(file.lambda_c).unwrap_or(1.0),
            lambda_s: args.lambda_s.or(file.lambda_s).unwrap_or(10.0),
            lambda_l: 0.0,
        },
        steps: args.steps.or(file.steps).unwrap_or(defaults.steps),
        optimizer: OptimizerSpec {
            lr: args.lr.or(file.lr).unwrap_or(defaults.optimizer.lr),
            ..defaults.optimizer
        },
        seed: args.seed.or(file.seed).unwrap_or(0),
        mode,
        log_every: args
            .log_every
            .or(file.log_every)
            .unwrap_or(defaults.log_every),
        net: NetConfig {
            base_channels: args
                .base_channels
                .or(file.base_channels)
                .unwrap_or(defaults.net.base_channels),
            ..defaults.net
        },
        autosave_every: defaults.autosave_every,
    };
    cfg.validate()?;
    print_effective(
        "train",
        serde_json::json!({
            "image_a": args.image_a, "image_b": args.image_b,
            "mask_a": args.mask_a, "mask_b": args.mask_b,
            "out": args.out, "resume": args.ckpt,
            "backbone": backbone_spec, "serial": serial,
            "steps": cfg.steps, "lr": cfg.optimizer.lr,
            "lambda_c": cfg.weights.lambda_c, "lambda_s": cfg.weights.lambda_s,
            "seed": cfg.seed, "mode": cfg.mode, "log_every": cfg.log_every,
            "base_channels": cfg.net.base_channels,
        }),
    );

    let image_a = ImageBuffer::load_png(&args.image_a)?;
    let image_b = ImageBuffer::load_png(&args.image_b)?;
    let masks = load_mask_set(
        args.mask_a.as_deref(),
        args.mask_b.as_deref(),
        args.palette.as_deref(),
        &image_a,
        &image_b,
    )?;
    let resume = args.ckpt.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        ck.check_backbone(&backbone);
    }
    let mut log = open_log(args.log.as_deref())?;
    let outcome = train_pair(
        &image_a,
        &image_b,
        &masks,
        &cfg,
        &backbone,
        TrainOptions {
            log: log.as_deref_mut().map(|w| w as &mut dyn Write),
            autosave_path: Some(&args.out),
            resume: resume.as_ref(),
        },
    )?;
    outcome.checkpoint.save(&args.out)?;
    println!(
        "trained {} steps: total loss {:.6} -> {:.6}; checkpoint {}",
        cfg.steps,
        outcome.initial_total,
        outcome.final_total,
        args.out.display()
    );
    Ok(())
}

fn run_stylize(args: StylizeArgs) -> Result<(), Error> {
    let file = read_file_config(args.common.config.as_deref())?;
    set_serial(args.common.serial || file.serial.unwrap_or(false));
    let depth = match args.depth {
        8 => PngDepth::Eight,
        16 => PngDepth::Sixteen,
        other => {
            return Err(Error::validation(format!(
                "depth must be 8 or 16, got {other}"
            )))
        }
    };
    print_effective(
        "stylize",
        serde_json::json!({
            "ckpt": args.ckpt, "input": args.input, "out": args.out,
            "direction": match args.direction { DirectionArg::ToA => "to_a", DirectionArg::ToB => "to_b" },
            "mask": args.mask, "depth": args.depth,
        }),
    );
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let input = ImageBuffer::load_png(&args.input)?;
    let mask = args
        .mask
        .as_deref()
        .map(|p| -> Result<LabelMap, Error> {
            let palette = args
                .palette
                .as_deref()
                .map(|pp| -> Result<Palette, Error> {
                    Palette::from_json(&std::fs::read_to_string(pp)?)
                })
                .transpose()?;
            // Reuse the mask loader against the input's own dimensions by
            // decoding a single-sided set with itself.
            let set = load_masks(
                p,
                p,
                palette.as_ref(),
                (input.height(), input.width()),
                (input.height(), input.width()),
            )?;
            Ok(set.side(cyclestyle::stylenet::StyleTag::A).clone())
        })
        .transpose()?;
    let direction = match args.direction {
        DirectionArg::ToA => Direction::ToA,
        DirectionArg::ToB => Direction::ToB,
    };
    let out = stylize(&StylizeRequest {
        checkpoint: &ckpt,
        input: &input,
        direction,
        masks: mask.as_ref(),
    })?;
    out.save_png(&args.out, depth)?;
    println!(
        "stylized {} -> {}",
        args.input.display(),
        args.out.display()
    );
    Ok(())
}

fn run_retrain(args: RetrainArgs) -> Result<(), Error> {
    let file = read_file_config(args.common.config.as_deref())?;
    set_serial(args.common.serial || file.serial.unwrap_or(false));
    let (backbone_spec, backbone) = resolve_backbone(args.common.backbone.as_deref(), &file)?;
    let defaults = TrainConfig::default();
    let base = Checkpoint::load(&args.ckpt)?;
    base.check_backbone(&backbone);
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_c: args.lambda_c.or(file.lambda_c).unwrap_or(1.0),
            lambda_s: args.lambda_s.or(file.lambda_s).unwrap_or(10.0),
            lambda_l: 0.0,
        },
        steps: args.steps.or(file.steps).unwrap_or(1000),
        optimizer: OptimizerSpec {
            lr: args.lr.or(file.lr).unwrap_or(defaults.optimizer.lr),
            ..defaults.optimizer
        },
        seed: args.seed.or(file.seed).unwrap_or(0),
        mode: TrainMode::InstanceNormOnly,
        log_every: args
            .log_every
            .or(file.log_every)
            .unwrap_or(defaults.log_every),
        net: base.manifest.net.clone(),
        autosave_every: defaults.autosave_every,
    };
    cfg.validate()?;
    print_effective(
        "retrain",
        serde_json::json!({
            "ckpt": args.ckpt, "image_a": args.image_a, "image_b": args.image_b,
            "mask_a": args.mask_a, "mask_b": args.mask_b, "out": args.out,
            "backbone": backbone_spec, "steps": cfg.steps, "lr": cfg.optimizer.lr,
            "lambda_c": cfg.weights.lambda_c, "lambda_s": cfg.weights.lambda_s,
            "seed": cfg.seed, "mode": "instance_norm_only",
        }),
    );
    let image_a = ImageBuffer::load_png(&args.image_a)?;
    let image_b = ImageBuffer::load_png(&args.image_b)?;
    let masks = load_mask_set(
        args.mask_a.as_deref(),
        args.mask_b.as_deref(),
        args.palette.as_deref(),
        &image_a,
        &image_b,
    )?;
    let mut log = open_log(args.log.as_deref())?;
    let outcome = retrain_for_new_style(
        &base,
        &image_a,
        &image_b,
        &masks,
        &cfg,
        &backbone,
        TrainOptions {
            log: log.as_deref_mut().map(|w| w as &mut dyn Write),
            autosave_path: Some(&args.out),
            resume: None,
        },
    )?;
    outcome.checkpoint.save(&args.out)?;
    println!(
        "retrained {} steps: total loss {:.6} -> {:.6}; checkpoint {}",
        cfg.steps,
        outcome.initial_total,
        outcome.final_total,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let file = read_file_config(args.common.config.as_deref())?;
    set_serial(args.common.serial || file.serial.unwrap_or(false));
    let (backbone_spec, backbone) = resolve_backbone(args.common.backbone.as_deref(), &file)?;
    print_effective(
        "eval",
        serde_json::json!({
            "ckpt": args.ckpt, "out": args.out, "backbone": backbone_spec,
        }),
    );
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let report = evaluate(&ckpt, &backbone)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Schema(format!("report encode: {e}")))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("report written to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> Result<(), Error> {
    let file = read_file_config(args.common.config.as_deref())?;
    set_serial(args.common.serial || file.serial.unwrap_or(false));
    let (backbone_spec, backbone) = resolve_backbone(args.common.backbone.as_deref(), &file)?;
    let weights = LossWeights {
        lambda_c: args.lambda_c.or(file.lambda_c).unwrap_or(1.0),
        lambda_s: args.lambda_s.or(file.lambda_s).unwrap_or(10.0),
        lambda_l: 0.0,
    };
    let steps = args.steps.or(file.steps).unwrap_or(50);
    print_effective(
        "baseline",
        serde_json::json!({
            "image_a": args.image_a, "image_b": args.image_b, "out": args.out,
            "backbone": backbone_spec, "steps": steps,
            "lambda_c": weights.lambda_c, "lambda_s": weights.lambda_s,
        }),
    );
    let image_a = ImageBuffer::load_png(&args.image_a)?;
    let image_b = ImageBuffer::load_png(&args.image_b)?;
    let (out, trace) =
        baseline_direct_transfer_traced(&image_a, &image_b, &weights, &backbone, steps)?;
    out.save_png(&args.out, PngDepth::Eight)?;
    println!(
        "baseline: objective {:.6} -> {:.6} over {} steps; image {}",
        trace.first().map(|s| s.objective).unwrap_or(f64::NAN),
        trace.last().map(|s| s.objective).unwrap_or(f64::NAN),
        steps,
        args.out.display()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_)
        | Error::Capacity(_)
        | Error::Correspondence(_)
        | Error::DegenerateRegion(_)
        | Error::Schema(_)
        | Error::Integrity(_)
        | Error::Version(_)
        | Error::Lookup(_) => 2,
        Error::NonFinite { .. } | Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Image(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Stylize(args) => run_stylize(args),
        Command::Retrain(args) => run_retrain(args),
        Command::Eval(args) => run_eval(args),
        Command::Baseline(args) => run_baseline(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
