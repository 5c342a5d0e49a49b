//! Command-line front end: dataset synthesis, training, evaluation and
//! single-image inference.
//!
//! Every command resolves its configuration from defaults, an optional TOML
//! config file, then command-line flags (flags win), and echoes the resolved
//! result into the output directory so a run can be reproduced from the echo
//! alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use toolseg::losses::AdvMode;
use toolseg::metrics::{self, evaluate, EvalReport, EvalSample};
use toolseg::synthdata::{
    generate_dataset, load_eval_pairs, load_image_png, load_mask_png, write_image_png,
    write_mask_png, DatasetManifest, ErrorModel, SceneConfig,
};
use toolseg::trainer::{self, TrainConfig};
use toolseg::{Error, Result};

const RUN_CONFIG: &str = "run_config.toml";

#[derive(Parser)]
#[command(name = "toolseg", about = "Surgical tool segmentation from unpaired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of images with clean and corrupted masks
    Synth(SynthArgs),
    /// Train the translation networks on an unpaired dataset
    Train(TrainArgs),
    /// Evaluate checkpoints against ground-truth masks
    Eval(EvalArgs),
    /// Segment a single image
    Infer(InferArgs),
}

/// Optional TOML config file; any section present replaces the built-in
/// defaults before flags are applied.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scene: Option<SceneConfig>,
    error_model: Option<ErrorModel>,
    train: Option<TrainConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// TOML config file with [scene] and [error_model] sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples to generate
    #[arg(long)]
    n: Option<usize>,
    /// Master seed for scene generation
    #[arg(long)]
    seed: Option<u64>,
    /// Square scene size in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Annotation error: translation stddev in pixels
    #[arg(long)]
    sigma_translate: Option<f64>,
    /// Annotation error: rotation stddev in degrees
    #[arg(long)]
    sigma_rotate: Option<f64>,
    /// Annotation error: log-scale stddev
    #[arg(long)]
    sigma_scale: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (as produced by `synth`)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    out: PathBuf,
    /// TOML config file with a [train] section
    #[arg(long)]
    config: Option<PathBuf>,
    /// Epochs at the fixed learning rate
    #[arg(long)]
    epochs_fixed: Option<usize>,
    /// Epochs of linear learning-rate decay
    #[arg(long)]
    epochs_decay: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Cycle-consistency weight λ
    #[arg(long)]
    lambda_cyc: Option<f64>,
    /// Edge-consistency weight μ
    #[arg(long)]
    mu_edge: Option<f64>,
    /// Disable the edge-consistency term (sets μ = 0)
    #[arg(long, conflicts_with = "mu_edge")]
    no_edge: bool,
    /// Adversarial objective
    #[arg(long, value_enum)]
    adv_mode: Option<AdvMode>,
    /// Master seed for initialization and data ordering
    #[arg(long)]
    seed: Option<u64>,
    /// Generator base width
    #[arg(long)]
    gen_width: Option<usize>,
    /// Generator residual blocks
    #[arg(long)]
    res_blocks: Option<usize>,
    /// Discriminator base width
    #[arg(long)]
    disc_width: Option<usize>,
    /// Discriminator strided layers
    #[arg(long)]
    disc_layers: Option<usize>,
    /// Replay buffer capacity
    #[arg(long)]
    buffer: Option<usize>,
    /// Resume from `<out>/latest`, or from an explicit checkpoint path
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint(s) to evaluate; repeat the flag to compare several
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Directory of input images; subdirectories are treated as sequences
    #[arg(long)]
    images: PathBuf,
    /// Directory of ground-truth masks, mirroring the images layout
    #[arg(long)]
    masks: PathBuf,
    /// Output directory for the report
    #[arg(long)]
    out: PathBuf,
    /// Also compute the boundary F-measure
    #[arg(long)]
    boundary_f1: bool,
    /// Boundary match tolerance in pixels
    #[arg(long, default_value_t = 2.0)]
    tolerance: f64,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint to segment with
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG, dims divisible by 4)
    #[arg(long)]
    input: PathBuf,
    /// Output mask path (0/255 PNG)
    #[arg(long)]
    output: PathBuf,
    /// Optional overlay visualization path
    #[arg(long)]
    overlay: Option<PathBuf>,
}

fn write_echo<T: Serialize>(dir: &Path, echo: &T) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string_pretty(echo)
        .map_err(|e| Error::InvalidConfig(format!("config echo: {e}")))?;
    let path = dir.join(RUN_CONFIG);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut scene = file.scene.unwrap_or_default();
    let mut error_model = file.error_model.unwrap_or_default();
    if let Some(size) = args.size {
        scene.height = size;
        scene.width = size;
    }
    if let Some(seed) = args.seed {
        scene.rng_seed = seed;
    }
    if let Some(v) = args.sigma_translate {
        error_model.sigma_translate = v;
    }
    if let Some(v) = args.sigma_rotate {
        error_model.sigma_rotate_deg = v;
    }
    if let Some(v) = args.sigma_scale {
        error_model.sigma_scale = v;
    }
    let n = args.n.unwrap_or(200);

    #[derive(Serialize)]
    struct Echo<'a> {
        command: &'a str,
        out: &'a Path,
        n_samples: usize,
        scene: &'a SceneConfig,
        error_model: &'a ErrorModel,
    }
    write_echo(
        &args.out,
        &Echo {
            command: "synth",
            out: &args.out,
            n_samples: n,
            scene: &scene,
            error_model: &error_model,
        },
    )?;

    let manifest = generate_dataset(&scene, &error_model, n, &args.out)?;
    let mut iou_sum = 0.0;
    for entry in &manifest.entries {
        let (_, gt, noisy) = manifest.entry_paths(entry);
        iou_sum += metrics::mask_iou(&load_mask_png(&gt)?, &load_mask_png(&noisy)?)?;
    }
    println!(
        "wrote {} samples ({}x{}) to {}",
        manifest.n_samples,
        scene.height,
        scene.width,
        args.out.display()
    );
    println!(
        "splits: {} images / {} annotations",
        manifest.image_split.len(),
        manifest.annotation_split.len()
    );
    println!(
        "mean IoU(gt, noisy) = {:.4}",
        iou_sum / manifest.n_samples as f64
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut cfg = file.train.unwrap_or_default();
    if let Some(v) = args.epochs_fixed {
        cfg.n_fixed_epochs = v;
    }
    if let Some(v) = args.epochs_decay {
        cfg.n_decay_epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.lambda_cyc {
        cfg.weights.lambda_cycle = v;
    }
    if let Some(v) = args.mu_edge {
        cfg.weights.mu_edge = v;
    }
    if args.no_edge {
        cfg.weights.mu_edge = 0.0;
    }
    if let Some(v) = args.adv_mode {
        cfg.weights.adv_mode = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.gen_width {
        cfg.gen_base_width = v;
    }
    if let Some(v) = args.res_blocks {
        cfg.gen_res_blocks = v;
    }
    if let Some(v) = args.disc_width {
        cfg.disc_base_width = v;
    }
    if let Some(v) = args.disc_layers {
        cfg.disc_layers = v;
    }
    if let Some(v) = args.buffer {
        cfg.buffer_capacity = v;
    }
    cfg.validate()?;

    let resume = args.resume.is_some();
    if let Some(src) = args.resume.as_deref().filter(|p| !p.as_os_str().is_empty()) {
        // explicit checkpoint: stage it as <out>/latest so training picks
        // it up exactly like an in-place resume
        fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        let dst = args.out.join(trainer::LATEST_CKPT);
        if src != dst {
            fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
        }
    }

    #[derive(Serialize)]
    struct Echo<'a> {
        command: &'a str,
        data: &'a Path,
        out: &'a Path,
        resume: bool,
        train: &'a TrainConfig,
    }
    write_echo(
        &args.out,
        &Echo {
            command: "train",
            data: &args.data,
            out: &args.out,
            resume,
            train: &cfg,
        },
    )?;

    let manifest = DatasetManifest::load(&args.data)?;
    trainer::train(&cfg, &manifest, &args.out, resume, |s| {
        println!(
            "epoch {:3}/{:<3} lr {:.3e} adv_GA {:.4} adv_GI {:.4} d_A {:.4} d_I {:.4} cyc {:.4} edge {:.4}",
            s.epoch,
            cfg.total_epochs(),
            s.lr,
            s.mean.adv_g_a,
            s.mean.adv_g_i,
            s.mean.disc_a,
            s.mean.disc_i,
            s.mean.cycle,
            s.mean.edge
        );
    })?;
    println!("done; checkpoints and {} in {}", trainer::LOG_FILE, args.out.display());
    Ok(())
}

/// Loads eval pairs; immediate subdirectories of `images` become sequences,
/// otherwise the whole directory is one sequence.
fn load_eval_samples(images: &Path, masks: &Path) -> Result<Vec<EvalSample>> {
    let mut subdirs: Vec<String> = fs::read_dir(images)
        .map_err(|e| Error::io(images, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    subdirs.sort();
    let mut samples = Vec::new();
    if subdirs.is_empty() {
        for (image, gt_mask) in load_eval_pairs(images, masks)? {
            samples.push(EvalSample {
                image,
                gt_mask,
                sequence: "all".into(),
            });
        }
    } else {
        for seq in subdirs {
            for (image, gt_mask) in load_eval_pairs(&images.join(&seq), &masks.join(&seq))? {
                samples.push(EvalSample {
                    image,
                    gt_mask,
                    sequence: seq.clone(),
                });
            }
        }
    }
    Ok(samples)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a> {
        command: &'a str,
        checkpoints: &'a [PathBuf],
        images: &'a Path,
        masks: &'a Path,
        out: &'a Path,
        boundary_f1: bool,
        tolerance: f64,
    }
    write_echo(
        &args.out,
        &Echo {
            command: "eval",
            checkpoints: &args.checkpoint,
            images: &args.images,
            masks: &args.masks,
            out: &args.out,
            boundary_f1: args.boundary_f1,
            tolerance: args.tolerance,
        },
    )?;

    let samples = load_eval_samples(&args.images, &args.masks)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no evaluation samples found".into()));
    }
    let tolerance = args.boundary_f1.then_some(args.tolerance);
    let mut text = String::new();
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    for ckpt in &args.checkpoint {
        let model = metrics::load_segmenter(ckpt)?;
        let report = evaluate(model.as_ref(), &samples, tolerance)?;
        text.push_str(&format!("== {} ==\n{}", ckpt.display(), report.render_text()));
        reports.insert(ckpt.display().to_string(), report);
    }
    print!("{text}");
    let txt_path = args.out.join("report.txt");
    fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    let json_path = args.out.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&reports)?)
        .map_err(|e| Error::io(&json_path, e))?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let out_dir = args.output.parent().unwrap_or(Path::new(".")).to_path_buf();

    #[derive(Serialize)]
    struct Echo<'a> {
        command: &'a str,
        checkpoint: &'a Path,
        input: &'a Path,
        output: &'a Path,
        overlay: Option<&'a Path>,
    }
    write_echo(
        &out_dir,
        &Echo {
            command: "infer",
            checkpoint: &args.checkpoint,
            input: &args.input,
            output: &args.output,
            overlay: args.overlay.as_deref(),
        },
    )?;

    let model = metrics::load_segmenter(&args.checkpoint)?;
    let image = load_image_png(&args.input)?;
    let annotation = model.segment(&image)?;
    let mask = metrics::binarize(&annotation, 0.0)?;
    write_mask_png(&args.output, &mask)?;
    println!(
        "mask with {} foreground pixels written to {}",
        mask.count_ones(),
        args.output.display()
    );

    if let Some(overlay_path) = &args.overlay {
        let (h, w) = image.hw();
        let mut rgb: Vec<f32> = image.tensor().flatten_all()?.to_vec1()?;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) != 0 {
                    let i = y * w + x;
                    // dim the pixel and push its red channel to full
                    rgb[i] = 0.4 * rgb[i] + 0.6;
                    rgb[h * w + i] *= 0.4;
                    rgb[2 * h * w + i] *= 0.4;
                }
            }
        }
        let grid = toolseg::grid::ImageGrid::from_vec(rgb, 3, h, w)?;
        write_image_png(overlay_path, &grid)?;
        println!("overlay written to {}", overlay_path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
