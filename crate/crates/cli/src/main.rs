mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ttdsr::autodiff::Checkpoint;
use ttdsr::data::{
    bicubic_resize, build_training_set, degrade, list_images, load_image, load_luma, read_manifest,
    rgb_to_ycbcr, save_plane_png, save_rgb_png, split_train_val, ycbcr_to_rgb, LoadedImage,
};
use ttdsr::metrics::{evaluate_paths, Bicubic, ScoreReport, Upscaler};
use ttdsr::network::{build_model, NetConfig, Ttdsr};
use ttdsr::tcheb::{coefficient_loss_profile, make_basis, tile_grid, zigzag_order};
use ttdsr::train::{train, TrainConfig};
use ttdsr::ValueRange;

use config::{ConfigError, ConfigFile, TrainSettings};

const OUT_DIR_ENV: &str = "TTDSR_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "ttdsr",
    version,
    about = "Tchebichef transform-domain image super-resolution"
)]
struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $TTDSR_OUT_DIR, else ./ttdsr-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the N-point polynomial matrix and a tile grid of the 2-D kernels.
    GenBasis {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Per-channel Tchebichef coefficient loss between an image and its degraded copy.
    AnalyzeFreq {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Train a model on patches from a directory or manifest of images.
    Train(TrainArgs),
    /// Super-resolve one image with a trained model.
    Sr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        /// Output file (default: <out>/sr.png).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a model (or plain bicubic when no model is given) on a directory.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Train one model per split point and tabulate held-out PSNR.
    SweepT {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated split points, e.g. 3,5,8.
        #[arg(long, value_delimiter = ',')]
        t_list: Vec<usize>,
        #[arg(long)]
        eval_dir: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// Directory of training images (PNG/BMP).
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Text file listing training images, one per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Percentage of manifest entries held out by path hash.
    #[arg(long)]
    val_percent: Option<u32>,
    #[arg(long)]
    scale: Option<usize>,
    /// Split point T.
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Leaky ReLU slope.
    #[arg(long)]
    alpha: Option<f64>,
    /// Channels per parallel high-frequency branch.
    #[arg(long)]
    branch_width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    limit_patches: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_local_residual: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 = bad settings, 3 = I/O or file format, 4 = training diverged, 1 = other.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ttdsr::Error>() {
            return match e {
                ttdsr::Error::InvalidArgument(_) => 2,
                ttdsr::Error::Io(_) | ttdsr::Error::Image(_) | ttdsr::Error::Checkpoint(_) => 3,
                ttdsr::Error::Diverged { .. } => 4,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

struct Ctx {
    file: ConfigFile,
    out: PathBuf,
    argv: Vec<String>,
}

impl Ctx {
    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `run-record.txt` next to the outputs.
    fn record(&self, command: &str, lines: &[String]) -> anyhow::Result<()> {
        let mut f = fs::File::create(self.output("run-record.txt"))?;
        writeln!(f, "# ttdsr {} run record", env!("CARGO_PKG_VERSION"))?;
        writeln!(f, "command = {command}")?;
        writeln!(f, "argv = {}", self.argv.join(" "))?;
        for l in lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => {
            ConfigFile::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => ConfigFile::default(),
    };
    let out = match cli.out {
        Some(p) => p,
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(p) => PathBuf::from(p),
            None => file.pick(None, "out", PathBuf::from("ttdsr-out"))?,
        },
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx {
        file,
        out,
        argv: std::env::args().collect(),
    };

    match cli.command {
        Command::GenBasis { n } => gen_basis(&ctx, n),
        Command::AnalyzeFreq { image, scale } => analyze_freq(&ctx, &image, scale),
        Command::Train(args) => {
            let settings = resolve_train(&ctx.file, &args)?;
            ctx.record("train", &settings.record_lines())?;
            let (model, losses) = run_training(&settings, &ctx.output("loss.log"))?;
            save_model(&ctx, &model)?;
            if let Some(last) = losses.last() {
                println!("final loss {last}");
            }
            Ok(())
        }
        Command::Sr {
            model,
            input,
            scale,
            output,
        } => {
            let scale = ctx.file.pick(scale, "scale", 3)?;
            let output = output.unwrap_or_else(|| ctx.output("sr.png"));
            ctx.record(
                "sr",
                &[
                    format!("model = {}", model.display()),
                    format!("input = {}", input.display()),
                    format!("scale = {scale}"),
                    format!("output = {}", output.display()),
                ],
            )?;
            super_resolve_file(&load_model(&model)?, &input, scale, &output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Eval { model, dir, scale } => {
            let scale = ctx.file.pick(scale, "scale", 3)?;
            ctx.record(
                "eval",
                &[
                    format!(
                        "model = {}",
                        model
                            .as_ref()
                            .map_or("bicubic".into(), |m| m.display().to_string())
                    ),
                    format!("dir = {}", dir.display()),
                    format!("scale = {scale}"),
                ],
            )?;
            let paths = list_images(&dir).with_context(|| format!("listing {}", dir.display()))?;
            if paths.is_empty() {
                return Err(ConfigError(format!("no PNG/BMP images in {}", dir.display())).into());
            }
            let report = match &model {
                Some(p) => evaluate_paths(&load_model(p)?, &paths, scale)?,
                None => evaluate_paths(&Bicubic, &paths, scale)?,
            };
            write_report(&ctx, &report)?;
            report.write_summary(std::io::stdout())?;
            Ok(())
        }
        Command::SweepT {
            train,
            t_list,
            eval_dir,
        } => sweep_t(&ctx, &train, &t_list, &eval_dir),
    }
}

fn gen_basis(ctx: &Ctx, n: Option<usize>) -> anyhow::Result<()> {
    let n = ctx.file.pick(n, "n", 8)?;
    let basis = make_basis(n)?;
    ctx.record("gen-basis", &[format!("n = {n}")])?;
    let dump = ctx.output(&format!("basis_{n}.txt"));
    basis.write_matrix_dump(fs::File::create(&dump)?)?;
    let kernels: Vec<_> = zigzag_order(n)
        .into_iter()
        .map(|(p, q)| basis.kernel_pq(p, q))
        .collect();
    let grid = tile_grid(&kernels, n)?;
    let tiles = ctx.output(&format!("kernels_{n}.png"));
    save_plane_png(&grid, &tiles)?;
    println!(
        "{} tiles -> {}; matrix -> {}",
        kernels.len(),
        tiles.display(),
        dump.display()
    );
    Ok(())
}

fn analyze_freq(ctx: &Ctx, image: &Path, scale: Option<usize>) -> anyhow::Result<()> {
    let scale = ctx.file.pick(scale, "scale", 3)?;
    ctx.record(
        "analyze-freq",
        &[
            format!("image = {}", image.display()),
            format!("scale = {scale}"),
        ],
    )?;
    let hr = load_luma(image).with_context(|| format!("reading {}", image.display()))?;
    let pair = degrade(&hr, scale)?;
    let basis = make_basis(8)?;
    let profile = coefficient_loss_profile(&pair.hr, &pair.lr, &basis)?;

    let mut table = fs::File::create(ctx.output("freq_profile.tsv"))?;
    writeln!(table, "channel\tp\tq\tmean_abs_loss")?;
    for (i, ((p, q), v)) in basis.kernel_orders().iter().zip(profile).enumerate() {
        writeln!(table, "{i}\t{p}\t{q}\t{v:.10e}")?;
    }
    // Two columns for plotting tools: channel, loss.
    let mut plot = fs::File::create(ctx.output("freq_profile.dat"))?;
    for (i, v) in profile.iter().enumerate() {
        writeln!(plot, "{i} {v:.10e}")?;
    }
    let low = profile[..6].iter().map(|v| v.abs()).sum::<f64>() / 6.0;
    let high = profile[6..].iter().map(|v| v.abs()).sum::<f64>() / 58.0;
    println!("mean |loss| channels 0-5: {low:.6e}, channels 6-63: {high:.6e}");
    Ok(())
}

fn resolve_train(file: &ConfigFile, a: &TrainArgs) -> anyhow::Result<TrainSettings> {
    let train_dir: Option<PathBuf> = file.pick_opt(a.train_dir.clone(), "train-dir")?;
    let manifest: Option<PathBuf> = file.pick_opt(a.manifest.clone(), "manifest")?;
    let images = match (train_dir, manifest) {
        (Some(dir), None) => {
            list_images(&dir).with_context(|| format!("listing {}", dir.display()))?
        }
        (None, Some(m)) => {
            let all = read_manifest(&m).with_context(|| format!("reading {}", m.display()))?;
            let val = file.pick(a.val_percent, "val-percent", 0)?;
            split_train_val(&all, val).0
        }
        (Some(_), Some(_)) => {
            return Err(
                ConfigError("give either --train-dir or --manifest, not both".into()).into(),
            )
        }
        (None, None) => {
            return Err(ConfigError("training needs --train-dir or --manifest".into()).into())
        }
    };
    if images.is_empty() {
        return Err(ConfigError("no training images found".into()).into());
    }
    let s = TrainSettings {
        images,
        scale: file.pick(a.scale, "scale", 3)?,
        split: file.pick(a.split, "split", 5)?,
        epochs: file.pick(a.epochs, "epochs", 100)?,
        batch_size: file.pick(a.batch_size, "batch-size", 64)?,
        lr: file.pick(a.lr, "lr", 1e-3)?,
        lambda: file.pick(a.lambda, "lambda", 0.01)?,
        alpha: file.pick(a.alpha, "alpha", 0.1)?,
        branch_width: file.pick(
            a.branch_width,
            "branch-width",
            NetConfig::default().branch_width,
        )?,
        seed: file.pick(a.seed, "seed", 0)?,
        patch: file.pick(a.patch, "patch", 32)?,
        stride: file.pick(a.stride, "stride", 16)?,
        limit_patches: file.pick_opt(a.limit_patches, "limit-patches")?,
        augment: !file.switch(a.no_augment, "no-augment")?,
        local_residual: !file.switch(a.no_local_residual, "no-local-residual")?,
    };
    if !(1..=4).contains(&s.scale) {
        return Err(ConfigError(format!("scale {} not in 1..=4", s.scale)).into());
    }
    if s.epochs == 0 || s.batch_size == 0 {
        return Err(ConfigError("epochs and batch size must be positive".into()).into());
    }
    Ok(s)
}

/// Trains a model and streams per-epoch losses to `log_path`.
fn run_training(s: &TrainSettings, log_path: &Path) -> anyhow::Result<(Ttdsr, Vec<f64>)> {
    let pairs = build_training_set(
        &s.images,
        s.augment,
        s.patch,
        s.stride,
        s.scale,
        s.seed,
        s.limit_patches,
    )?;
    if pairs.is_empty() {
        bail!(ConfigError(
            "no patches could be extracted; images smaller than the patch size?".into()
        ));
    }
    log::info!(
        "{} training patches from {} images",
        pairs.len(),
        s.images.len()
    );
    let basis = make_basis(8)?;
    let cfg = NetConfig {
        split_point: s.split,
        leaky_alpha: s.alpha,
        branch_width: s.branch_width,
        local_residual: s.local_residual,
        seed: s.seed,
        ..NetConfig::default()
    };
    let mut model = build_model(cfg, &basis)?;
    log::info!("{} trainable parameters", model.trainable_parameter_count());
    let tc = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        learning_rate: s.lr,
        lambda: s.lambda,
        seed: s.seed,
    };
    let mut log = fs::File::create(log_path)?;
    writeln!(log, "epoch\tloss")?;
    let mut io_err = None;
    let outcome = train(&mut model, &pairs, &tc, |e| {
        if let Err(err) = writeln!(log, "{}\t{}", e.epoch, e.mean_loss).and_then(|_| log.flush()) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok((model, outcome.epochs.iter().map(|e| e.mean_loss).collect()))
}

fn save_model(ctx: &Ctx, model: &Ttdsr) -> anyhow::Result<()> {
    let path = ctx.output("model.ckpt");
    model.to_checkpoint().save(&path)?;
    save_plane_png(&model.itcl_kernel_image()?, ctx.output("itcl_kernels.png"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Ttdsr> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Ttdsr::from_checkpoint(&ck, &make_basis(8)?)?)
}

/// Luminance goes through the model; chroma is enlarged with bicubic.
fn super_resolve_file(
    model: &Ttdsr,
    input: &Path,
    scale: usize,
    output: &Path,
) -> anyhow::Result<()> {
    match load_image(input).with_context(|| format!("reading {}", input.display()))? {
        LoadedImage::Gray(plane) => save_plane_png(&model.super_resolve(&plane, scale)?, output)?,
        LoadedImage::Rgb(rgb) => {
            let (y, cb, cr) = rgb_to_ycbcr(&rgb);
            let (h, w) = (rgb.height * scale, rgb.width * scale);
            let y = model.super_resolve(&y, scale)?;
            let cb = bicubic_resize(&cb, h, w)?;
            let cr = bicubic_resize(&cr, h, w)?;
            save_rgb_png(
                &ycbcr_to_rgb(&y.rescaled(ValueRange::EIGHT_BIT), &cb, &cr)?,
                output,
            )?;
        }
    }
    Ok(())
}

fn write_report(ctx: &Ctx, report: &ScoreReport) -> anyhow::Result<()> {
    report.write_tsv(fs::File::create(ctx.output("scores.tsv"))?)?;
    report.write_summary(fs::File::create(ctx.output("scores.txt"))?)?;
    Ok(())
}

fn sweep_t(ctx: &Ctx, args: &TrainArgs, t_list: &[usize], eval_dir: &Path) -> anyhow::Result<()> {
    let base = resolve_train(&ctx.file, args)?;
    let t_list: Vec<usize> = if t_list.is_empty() {
        ctx.file
            .pick(None, "t-list", String::from("3,5,8"))?
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("bad split point `{t}`")))
            })
            .collect::<Result<_, _>>()?
    } else {
        t_list.to_vec()
    };
    let held = list_images(eval_dir).with_context(|| format!("listing {}", eval_dir.display()))?;
    if held.is_empty() {
        return Err(ConfigError(format!("no PNG/BMP images in {}", eval_dir.display())).into());
    }
    let mut lines = base.record_lines();
    lines.push(format!(
        "t-list = {}",
        t_list
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    lines.push(format!("eval-dir = {}", eval_dir.display()));
    ctx.record("sweep-t", &lines)?;

    let bicubic = evaluate_paths(&Bicubic, &held, base.scale)?;
    let mut table = fs::File::create(ctx.output("sweep.tsv"))?;
    writeln!(table, "T\tmean_psnr_db\tmean_ssim\tfinal_loss")?;
    println!("bicubic: {:.3} dB", bicubic.mean_psnr());
    for &t in t_list.iter() {
        let s = TrainSettings {
            split: t,
            ..base.clone()
        };
        let (model, losses) = run_training(&s, &ctx.output(&format!("loss_T{t}.log")))?;
        model
            .to_checkpoint()
            .save(ctx.output(&format!("model_T{t}.ckpt")))?;
        let report = evaluate_paths(&model as &dyn Upscaler, &held, s.scale)?;
        let last = losses.last().copied().unwrap_or(f64::NAN);
        writeln!(
            table,
            "{t}\t{:.4}\t{:.6}\t{last}",
            report.mean_psnr(),
            report.mean_ssim()
        )?;
        table.flush()?;
        println!("T = {t}: {:.3} dB", report.mean_psnr());
    }
    Ok(())
}
