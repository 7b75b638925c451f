//! Command-line surface: synthetic data generation, staged training,
//! one-shot and streaming inversion, animation, evaluation, and the
//! encoder-ablation table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use avatar_core::checkpoint;
use avatar_core::config::Config;
use avatar_core::encoders::{PlaneEncoderMode, TexEncoderInput};
use avatar_core::evaluation::ablation_suite;
use avatar_core::fusion::FusionRegistry;
use avatar_core::manifest::{load_image, save_image, FrameRecord, Manifest, Role};
use avatar_core::metrics::{compute_metrics, landmark_series};
use avatar_core::pipeline::{animate, invert_one_shot, AvatarSystem, FrameObservation};
use avatar_core::training::{build_train_set, run_stage, sample_eval_sequence, Stage};

#[derive(Parser)]
#[command(name = "avatar", about = "Animatable avatar world: synthesis, inversion, evaluation")]
struct Cli {
    /// Configuration file (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic identity sequences (manifests + PNG frames) and
    /// the world checkpoint they came from.
    SynthData(SynthArgs),
    /// Run one training stage: prior | s1 | s2 | s3 | convfusion.
    Train(TrainArgs),
    /// Reconstruct an avatar from a manifest's source frames.
    Invert(InvertArgs),
    /// Render an avatar under a manifest's poses.
    Animate(AnimateArgs),
    /// Score an avatar against a manifest's eval frames.
    Eval(EvalArgs),
    /// Evaluate the encoder ablation table over trained variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of identities to emit.
    #[arg(long, default_value_t = 4)]
    identities: usize,
    /// Frames per identity sequence.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// prior | s1 | s2 | s3 | convfusion
    stage: String,
    /// Checkpoint to continue from; a fresh system is initialized if absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Encoder variant for fresh systems: full | wo-nt | tri-offsets.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Output checkpoint path (default: <out>/<variant>.ckpt).
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// One-shot inversion from the first source frame.
    #[arg(long, conflicts_with = "stream")]
    one_shot: bool,
    /// Streaming multi-frame inversion over all source frames.
    #[arg(long)]
    stream: bool,
    /// Fusion strategy for --stream (see `--fusion list`).
    #[arg(long, default_value = "recurrent")]
    fusion: String,
    /// Avatar output path (default: <out>/avatar.bin).
    #[arg(long)]
    avatar: Option<PathBuf>,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    avatar: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    avatar: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Fully trained system (UV texture encoder + SFT plane encoder).
    #[arg(long)]
    ckpt: PathBuf,
    /// Variant trained with posed-image texture-encoder inputs.
    #[arg(long)]
    wo_nt: PathBuf,
    /// Variant trained with direct plane-feature offsets.
    #[arg(long)]
    tri_offsets: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {path:?}"))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    fs::create_dir_all(&cli.out)?;

    match &cli.command {
        Command::SynthData(args) => synth_data(&cli, &config, args),
        Command::Train(args) => train(&cli, &config, args),
        Command::Invert(args) => invert(&cli, args),
        Command::Animate(args) => run_animate(&cli, args),
        Command::Eval(args) => run_eval(&cli, args),
        Command::Ablate(args) => run_ablate(args),
    }
}

fn synth_data(cli: &Cli, config: &Config, args: &SynthArgs) -> Result<()> {
    let mut sys = AvatarSystem::new(config.clone());
    let frames = args.frames.unwrap_or(config.eval.sequence_len);
    checkpoint::save_system(&mut sys, &cli.out.join("world.ckpt"))?;
    config.save(&cli.out.join("config.toml"))?;

    for i in 0..args.identities {
        let sample = sample_eval_sequence(&sys, i, frames);
        let dir = cli.out.join(format!("identity_{i:03}"));
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        let mut records = Vec::new();
        for (t, f) in sample.frames.iter().enumerate() {
            let rel = format!("frames/{t:03}.png");
            save_image(&f.image, &dir.join(&rel))?;
            let role = if t < config.eval.source_window.min(frames.saturating_sub(1)) {
                Role::Source
            } else {
                Role::Eval
            };
            records.push(FrameRecord {
                image: rel,
                params: f.params.clone(),
                camera: f.camera.clone(),
                role,
            });
        }
        Manifest { frames: records }.save(&dir.join("manifest.json"))?;
        println!("identity {i:03}: {frames} frames -> {}", dir.display());
    }
    println!("world checkpoint: {}", cli.out.join("world.ckpt").display());
    Ok(())
}

fn variant_system(config: &Config, variant: &str) -> Result<AvatarSystem> {
    Ok(match variant {
        "full" => AvatarSystem::new(config.clone()),
        "wo-nt" => AvatarSystem::with_variants(
            config.clone(),
            TexEncoderInput::PosedImage,
            PlaneEncoderMode::SftModulation,
        ),
        "tri-offsets" => AvatarSystem::with_variants(
            config.clone(),
            TexEncoderInput::UvAligned,
            PlaneEncoderMode::DirectOffsets,
        ),
        other => bail!("unknown variant `{other}` (full | wo-nt | tri-offsets)"),
    })
}

fn train(cli: &Cli, config: &Config, args: &TrainArgs) -> Result<()> {
    let stage = Stage::parse(&args.stage)?;
    let mut sys = match &args.ckpt {
        Some(path) => checkpoint::load_system(path)?,
        None => variant_system(config, &args.variant)?,
    };

    let train_set = match stage {
        Stage::Prior | Stage::S3 | Stage::ConvFusion => None,
        Stage::S1 | Stage::S2 => {
            println!(
                "building training corpus: {} identities x {} frames",
                sys.config.training.train_identities, sys.config.training.frames_per_identity
            );
            Some(build_train_set(
                &sys,
                sys.config.training.train_identities,
                sys.config.training.frames_per_identity,
            ))
        }
    };

    let log_path = cli.out.join("loss_log.txt");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let outcome = run_stage(&mut sys, stage, train_set.as_ref(), &mut log)?;
    if let (Some(first), Some(last)) = (outcome.reports.first(), outcome.reports.last()) {
        println!(
            "stage {}: total {:.6} -> {:.6} over {} steps",
            stage.name(),
            first.total,
            last.total,
            outcome.reports.len()
        );
    }

    let out = args
        .ckpt_out
        .clone()
        .unwrap_or_else(|| cli.out.join(format!("{}.ckpt", args.variant)));
    checkpoint::save_system(&mut sys, &out)?;
    println!("checkpoint: {} (loss log: {})", out.display(), log_path.display());
    Ok(())
}

fn manifest_frames(manifest_path: &Path, roles: &[Role]) -> Result<Vec<FrameObservation>> {
    let manifest = Manifest::load(manifest_path)?;
    let mut frames = Vec::new();
    for record in &manifest.frames {
        if !roles.contains(&record.role) {
            continue;
        }
        let image = load_image(&Manifest::image_path(manifest_path, record))?;
        frames.push(FrameObservation {
            image,
            params: record.params.clone(),
            camera: record.camera.clone(),
        });
    }
    Ok(frames)
}

fn invert(cli: &Cli, args: &InvertArgs) -> Result<()> {
    if !args.one_shot && !args.stream {
        bail!("choose --one-shot or --stream");
    }
    let sys = checkpoint::load_system(&args.ckpt)?;
    let sources = manifest_frames(&args.manifest, &[Role::Source])?;
    if sources.is_empty() {
        bail!("manifest has no source frames");
    }

    let avatar = if args.one_shot {
        invert_one_shot(&sys, &sources[0])?.0
    } else {
        let registry = FusionRegistry::with_defaults();
        if args.fusion == "list" {
            println!("fusion strategies: {}", registry.names().join(", "));
            return Ok(());
        }
        registry.get(&args.fusion)?.invert(&sys, &sources)?
    };

    let out = args
        .avatar
        .clone()
        .unwrap_or_else(|| cli.out.join("avatar.bin"));
    fs::write(&out, checkpoint::avatar_to_bytes(&avatar)?)?;
    println!(
        "avatar from {} source frame(s) -> {}",
        if args.one_shot { 1 } else { sources.len() },
        out.display()
    );
    Ok(())
}

fn run_animate(cli: &Cli, args: &AnimateArgs) -> Result<()> {
    let sys = checkpoint::load_system(&args.ckpt)?;
    let avatar = checkpoint::avatar_from_bytes(&fs::read(&args.avatar)?)?;
    let manifest = Manifest::load(&args.manifest)?;
    let frames_dir = cli.out.join("animated");
    fs::create_dir_all(&frames_dir)?;
    for (i, record) in manifest.frames.iter().enumerate() {
        let out = animate(&sys, &avatar, &record.params, &record.camera)?;
        save_image(&out.rgb, &frames_dir.join(format!("{i:03}.png")))?;
    }
    println!(
        "rendered {} frames -> {}",
        manifest.frames.len(),
        frames_dir.display()
    );
    Ok(())
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let sys = checkpoint::load_system(&args.ckpt)?;
    let avatar = checkpoint::avatar_from_bytes(&fs::read(&args.avatar)?)?;
    let manifest = Manifest::load(&args.manifest)?;

    let mut pred = Vec::new();
    let mut target = Vec::new();
    let mut poses = Vec::new();
    for record in manifest.frames.iter().filter(|f| f.role == Role::Eval) {
        let gt = load_image(&Manifest::image_path(&args.manifest, record))?;
        let out = animate(&sys, &avatar, &record.params, &record.camera)?;
        pred.push(out.rgb);
        target.push(gt);
        poses.push((record.params.clone(), record.camera.clone()));
    }
    if pred.is_empty() {
        bail!("manifest has no eval frames");
    }
    let lms = landmark_series(&sys.head, &poses)?;
    let res = sys.render_resolution() as f64;
    let report = compute_metrics(
        &sys.proxy,
        &pred,
        &target,
        &lms,
        &lms,
        (2.0 * res * res).sqrt(),
    )?;
    println!("{}", report.summary());
    let json = serde_json::to_string_pretty(&report)?;
    let out = cli.out.join("metrics.json");
    fs::write(&out, json)?;
    println!("metrics: {}", out.display());
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let full = checkpoint::load_system(&args.ckpt)?;
    let wo_nt = checkpoint::load_system(&args.wo_nt)?;
    let tri = checkpoint::load_system(&args.tri_offsets)?;
    let e = &full.config.eval;
    let report = ablation_suite(
        &full,
        &wo_nt,
        &tri,
        e.eval_identities,
        e.sequence_len,
        e.eval_frames,
    )?;
    print!("{}", report.render_table());
    Ok(())
}
