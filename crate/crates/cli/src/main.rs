//! `fiberseg`: synthetic SFRP phantoms, classical baselines, residual FCN
//! training and whole-volume evaluation, all driven by VXG1 volume files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fiberseg_core::baselines::{
    best_dice_threshold, forest_predict, frangi_vesselness, otsu_threshold, save_forest,
    train_forest, Binarize, ForestConfig, FrangiParams,
};
use fiberseg_core::filters::{compute_feature_stack, DEFAULT_FEATURE_SCALES};
use fiberseg_core::infer::normalize_then_predict;
use fiberseg_core::metrics::{dice_report, render_error_map};
use fiberseg_core::model::{build_model, load_checkpoint, save_checkpoint};
use fiberseg_core::phantom::{generate_pair, generate_phantom, PhantomSpec};
use fiberseg_core::train::{preset, train_loop, TrainConfig};
use fiberseg_core::volgrid::{
    load_volume, normalize, save_label_volume, save_volume, LabelVolume, Volume,
};

/// Default seed when none is given, so runs are reproducible by default.
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "fiberseg",
    about = "Short-glass-fiber segmentation pipeline on synthetic CT phantoms",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom (gray + label VXG1 pair) from a spec file.
    Phantom(PhantomArgs),
    /// Run a classical baseline and print its Dice report line.
    Baseline(BaselineArgs),
    /// Train a network on a gray/label pair and write a checkpoint.
    Train(TrainArgs),
    /// Predict a whole volume with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a predicted segmentation against ground truth.
    Eval(EvalArgs),
    /// Render one slice's confusion as a P6 error map.
    Render(RenderArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Flat key=value spec file (dims=, voxel_size_um=, ...).
    #[arg(long)]
    spec: PathBuf,
    /// Output stem; writes <stem>_gray.vxg and <stem>_label.vxg.
    #[arg(long)]
    out: String,
    /// Render the same scene at MR and LR pitch (four output files).
    #[arg(long)]
    lr_pair: bool,
    /// Overrides the spec file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BaselineArgs {
    /// otsu | best | frangi | rf
    #[arg(long)]
    method: String,
    /// Evaluation gray volume.
    #[arg(long)]
    gray: PathBuf,
    /// Evaluation ground-truth labels.
    #[arg(long)]
    label: PathBuf,
    /// Training gray volume (required for frangi and rf).
    #[arg(long)]
    train_gray: Option<PathBuf>,
    /// Training labels (required for frangi and rf).
    #[arg(long)]
    train_label: Option<PathBuf>,
    /// Volume name used in the report line; defaults to the gray file stem.
    #[arg(long)]
    volume: Option<String>,
    /// Persist the trained forest (rf only).
    #[arg(long)]
    forest_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment preset: {mr,lr}{2d,3d}-{shallow,deep}.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    gray: PathBuf,
    #[arg(long)]
    label: PathBuf,
    /// Checkpoint output path; the training log goes to <out>.log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8000)]
    iterations: u64,
    #[arg(long, default_value_t = 3)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Disable flip/rotate augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0.5)]
    fiber_bias: f64,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    gray: PathBuf,
    /// Output stem; writes <stem>_prob.vxg and <stem>_seg.vxg.
    #[arg(long)]
    out: String,
    /// 3D patch extent as z,y,x (defaults to the pitch regime's patch).
    #[arg(long)]
    patch: Option<String>,
    /// 3D stride as z,y,x (defaults to half the patch).
    #[arg(long)]
    stride: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    label: PathBuf,
    #[arg(long, default_value = "net")]
    method: String,
    #[arg(long)]
    volume: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    label: PathBuf,
    #[arg(long)]
    z: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fiberseg: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_gray(path: &Path) -> anyhow::Result<Volume> {
    load_volume(path)
        .and_then(|v| v.into_gray())
        .with_context(|| format!("loading gray volume {}", path.display()))
}

fn load_label(path: &Path) -> anyhow::Result<LabelVolume> {
    load_volume(path)
        .and_then(|v| v.into_label())
        .with_context(|| format!("loading label volume {}", path.display()))
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string())
}

fn cmd_phantom(args: PhantomArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading spec file {}", args.spec.display()))?;
    let (mut spec, hints) = PhantomSpec::parse(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.lr_pair {
        let lr = spec.lr_counterpart(&hints);
        let ((mr_gray, mr_label), (lr_gray, lr_label)) = generate_pair(&spec, &lr, spec.seed)?;
        for (suffix, gray, label) in [
            ("mr", &mr_gray, &mr_label),
            ("lr", &lr_gray, &lr_label),
        ] {
            save_volume(gray, Path::new(&format!("{}_{}_gray.vxg", args.out, suffix)))?;
            save_label_volume(label, Path::new(&format!("{}_{}_label.vxg", args.out, suffix)))?;
        }
        println!(
            "wrote {0}_mr_gray.vxg {0}_mr_label.vxg {0}_lr_gray.vxg {0}_lr_label.vxg",
            args.out
        );
    } else {
        let (gray, label) = generate_phantom(&spec)?;
        save_volume(&gray, Path::new(&format!("{}_gray.vxg", args.out)))?;
        save_label_volume(&label, Path::new(&format!("{}_label.vxg", args.out)))?;
        println!(
            "wrote {0}_gray.vxg {0}_label.vxg (fiber fraction {1:.4})",
            args.out,
            label.fiber_fraction()
        );
    }
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> anyhow::Result<()> {
    let gray = load_gray(&args.gray)?;
    let label = load_label(&args.label)?;
    let volume = args.volume.clone().unwrap_or_else(|| stem_of(&args.gray));

    let train_pair = || -> anyhow::Result<(Volume, LabelVolume)> {
        let (Some(g), Some(l)) = (&args.train_gray, &args.train_label) else {
            bail!(
                "method {} needs --train-gray and --train-label",
                args.method
            );
        };
        Ok((load_gray(g)?, load_label(l)?))
    };

    let report = match args.method.as_str() {
        "otsu" => {
            let threshold = otsu_threshold(&gray, 256)?;
            let seg = Binarize::apply(&gray, threshold);
            dice_report(&label, &seg, "otsu", &volume)?
        }
        "best" => {
            let (threshold, _) = best_dice_threshold(&gray, &label, 256)?;
            println!("threshold={threshold}");
            let seg = Binarize::apply(&gray, threshold);
            dice_report(&label, &seg, "best", &volume)?
        }
        "frangi" => {
            let (train_gray, train_label) = train_pair()?;
            let params = FrangiParams::for_pitch(gray.voxel_size_um);
            let vt = frangi_vesselness(&train_gray, &params)?;
            let (threshold, _) = best_dice_threshold(&vt, &train_label, 256)?;
            let ve = frangi_vesselness(&gray, &params)?;
            let seg = Binarize::apply(&ve, threshold);
            dice_report(&label, &seg, "frangi", &volume)?
        }
        "rf" => {
            let (train_gray, train_label) = train_pair()?;
            let train_norm = normalize(&train_gray)?;
            let eval_norm = normalize(&gray)?;
            let stack_train = compute_feature_stack(&train_norm, &DEFAULT_FEATURE_SCALES)?;
            let stack_eval = compute_feature_stack(&eval_norm, &DEFAULT_FEATURE_SCALES)?;
            let cfg = ForestConfig {
                seed: args.seed,
                ..ForestConfig::default()
            };
            let forest = train_forest(&stack_train, &train_label, &cfg)?;
            if let Some(path) = &args.forest_out {
                save_forest(&forest, path)?;
            }
            let seg = forest_predict(&forest, &stack_eval)?;
            dice_report(&label, &seg, "rf", &volume)?
        }
        other => bail!("unknown baseline method `{other}` (otsu|best|frangi|rf)"),
    };
    println!("{report}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let p = preset(&args.preset)?;
    let gray = load_gray(&args.gray)?;
    let label = load_label(&args.label)?;
    let gray = normalize(&gray)?;

    let mut model = build_model(&p.model, args.seed)?;
    let cfg = TrainConfig {
        iterations: args.iterations,
        batch_size: args.batch_size,
        lr: args.lr,
        patch_shape: p.patch_shape,
        augment: !args.no_augment,
        fiber_biased_sampling_prob: args.fiber_bias,
        seed: args.seed,
        log_every: args.log_every,
    };
    let record = train_loop(&gray, &label, &mut model, &cfg)?;
    save_checkpoint(&mut model, &args.out)?;
    let log_path = args.out.with_extension("log");
    std::fs::write(&log_path, record.render())
        .with_context(|| format!("writing {}", log_path.display()))?;
    let last = record.logged.last().expect("at least one log entry");
    println!(
        "trained {} for {} iterations (final loss {:.4}, {:.1}s); checkpoint {}",
        args.preset,
        args.iterations,
        last.loss,
        last.secs,
        args.out.display()
    );
    Ok(())
}

fn parse_triple(s: &str) -> anyhow::Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad z,y,x triple `{s}`"))?;
    match parts.as_slice() {
        [c] => Ok((*c, *c, *c)),
        [z, y, x] => Ok((*z, *y, *x)),
        _ => bail!("expected one value or z,y,x, got `{s}`"),
    }
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let mut model = load_checkpoint(&args.checkpoint, None)?;
    let gray = load_gray(&args.gray)?;
    let patch = args.patch.as_deref().map(parse_triple).transpose()?;
    let stride = args.stride.as_deref().map(parse_triple).transpose()?;
    let (prob, seg) = normalize_then_predict(&mut model, &gray, patch, stride)?;
    let prob_path = format!("{}_prob.vxg", args.out);
    let seg_path = format!("{}_seg.vxg", args.out);
    save_volume(&prob, Path::new(&prob_path))?;
    save_label_volume(&seg, Path::new(&seg_path))?;
    println!("wrote {prob_path} {seg_path}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let pred = load_label(&args.pred)?;
    let label = load_label(&args.label)?;
    let volume = args.volume.clone().unwrap_or_else(|| stem_of(&args.pred));
    let report = dice_report(&label, &pred, &args.method, &volume)?;
    println!("{report}");
    Ok(())
}

fn cmd_render(args: RenderArgs) -> anyhow::Result<()> {
    let pred = load_label(&args.pred)?;
    let label = load_label(&args.label)?;
    render_error_map(&label, &pred, args.z, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
