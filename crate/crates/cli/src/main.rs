use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dmtnet::analysis::{complexity, count_params, dump_scale_signals, model_flops};
use dmtnet::data::{extract_patches, load_sample, ImageSample, Manifest, ManifestEntry, PatchSpec};
use dmtnet::gradcheck::{grad_check, GradCheckOptions};
use dmtnet::imageio::{load_image, save_image, BitDepth};
use dmtnet::metrics::{evaluate, psnr};
use dmtnet::persist::{load_checkpoint, load_weights, save_checkpoint, save_weights, Checkpoint};
use dmtnet::train::{toy_problem, train_loop, StepRecord, TrainCallbacks, TrainConfig, TrainState};
use dmtnet::{Dmtnet, ModelConfig};

const THREADS_ENV: &str = "DMTNET_THREADS";

/// Dual-pixel defocus deblurring.
///
/// Set DMTNET_THREADS to bound the worker pool used by evaluation and
/// the tensor kernels.
#[derive(Parser)]
#[command(name = "dmtnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Restore a sharp image from a left/right view pair.
    Infer(InferArgs),
    /// Overfit a model on a few samples and write a checkpoint and loss log.
    TrainToy(TrainArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Score a model on a manifest of view pairs and targets.
    Eval(EvalArgs),
    /// Print parameter counts, FLOPs and attention complexity.
    Count(CountArgs),
    /// Cut overlapping patches from every entry of a manifest.
    ExtractPatches(PatchArgs),
    /// Write per-module scale weights and per-scale feature maps.
    DumpScales(DumpArgs),
}

#[derive(Args)]
struct ModelChoice {
    /// Named preset: dmtnet-t, dmtnet-s, dmtnet-b, dmtnet-l, dmtnet-h, micro, toy.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set num_dmssrm=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ModelChoice {
    fn resolve(&self, default: &str) -> Result<ModelConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (_, Some(path)) => ModelConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            (Some(name), None) => ModelConfig::preset(name)?,
            (None, None) => ModelConfig::preset(default)?,
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }

    fn is_default(&self) -> bool {
        self.preset.is_none() && self.config.is_none() && self.overrides.is_empty()
    }
}

#[derive(Args)]
struct InferArgs {
    /// Weight file.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Write a 16-bit PNG instead of 8-bit.
    #[arg(long)]
    sixteen_bit: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelChoice,
    /// Training manifest. Without one, trains on a synthetic 64x64 patch.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for `checkpoint.dmtw`, `weights.dmtw` and `loss.tsv`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Random square crop per sample.
    #[arg(long)]
    crop: Option<usize>,
    /// Random flips per sample.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Save `checkpoint.dmtw` every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Print every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelChoice,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Coordinates checked per tensor; all of them by default.
    #[arg(long)]
    coords: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelChoice,
    /// Image size for FLOPs and attention complexity, as HxW.
    #[arg(long, default_value = "1120x1680", value_parser = parse_size)]
    size: (usize, usize),
}

#[derive(Args)]
struct PatchArgs {
    /// Manifest of full-size images.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = 0.6)]
    overlap: f64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("`{s}` is not HxW"))?;
    let h = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    let w = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn load_model(path: &Path) -> Result<Dmtnet<f32>> {
    let (params, config) = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Dmtnet::from_parts(config, params)?)
}

fn bit_depth(sixteen: bool) -> BitDepth {
    if sixteen {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    }
}

fn infer(args: &InferArgs) -> Result<()> {
    let model = load_model(&args.weights)?;
    let left = load_image::<f32>(&args.left)?;
    let right = load_image::<f32>(&args.right)?;
    let out = model.infer(&right, &left)?;
    save_image(&out, &args.output, bit_depth(args.sixteen_bit))?;
    let [_, _, h, w] = out.dims4()?;
    println!("wrote {} ({w}x{h})", args.output.display());
    Ok(())
}

struct TrainLog {
    loss: BufWriter<File>,
    every: usize,
    ckpt_path: PathBuf,
    config: ModelConfig,
}

impl TrainCallbacks<f32> for TrainLog {
    fn on_step(&mut self, r: &StepRecord) -> dmtnet::Result<()> {
        writeln!(self.loss, "{}\t{:e}\t{:e}", r.step, r.lr, r.loss)?;
        if self.every > 0 && r.step % self.every == 0 {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.6}", r.step, r.lr, r.loss);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>) -> dmtnet::Result<()> {
        self.loss.flush()?;
        save_checkpoint(
            &Checkpoint { config: self.config.clone(), params: state.params.clone(), optimizer: Some(state.optim.clone()) },
            &self.ckpt_path,
        )
    }
}

fn train_toy(args: &TrainArgs) -> Result<()> {
    let (toy_model, _, toy_sample) = toy_problem::<f32>(args.seed)?;
    let data: Vec<ImageSample<f32>> = match &args.manifest {
        Some(path) => {
            let manifest = Manifest::load(path)?;
            manifest.entries.iter().map(load_sample).collect::<dmtnet::Result<_>>()?
        }
        None => vec![toy_sample],
    };
    let cfg = TrainConfig {
        lr_init: args.lr,
        lr_min: args.lr_min,
        total_steps: args.steps,
        batch: args.batch,
        crop: args.crop,
        augment: args.augment,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let (model, mut state) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
            if !args.model.is_default() && args.model.resolve("micro")? != ckpt.config {
                bail!("model options disagree with the config stored in {}", path.display());
            }
            let optim = ckpt.optimizer.with_context(|| format!("{} has no optimizer state", path.display()))?;
            (ckpt.config, TrainState { params: ckpt.params, optim })
        }
        None => {
            let model = if args.model.is_default() { toy_model } else { args.model.resolve("micro")? };
            let state = TrainState::new(&model, args.seed)?;
            (model, state)
        }
    };

    let loss_path = args.out_dir.join("loss.tsv");
    let file = if args.resume.is_some() && loss_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&loss_path)?
    } else {
        let mut f = File::create(&loss_path)?;
        writeln!(f, "step\tlr\tloss")?;
        f
    };
    let mut log = TrainLog {
        loss: BufWriter::new(file),
        every: args.log_every,
        ckpt_path: args.out_dir.join("checkpoint.dmtw"),
        config: model.clone(),
    };
    let records = train_loop(&model, &cfg, &data, &mut state, &mut log)?;
    log.loss.flush()?;
    log.on_checkpoint(&state)?;
    save_weights(&state.params, &model, &args.out_dir.join("weights.dmtw"))?;

    if let Some(last) = records.last() {
        println!("trained steps {}..{}, final loss {:.6}", records[0].step, last.step + 1, last.loss);
    } else {
        println!("checkpoint was already at step {}", state.step());
    }
    let net = Dmtnet::from_parts(model, state.params)?;
    for s in data.iter().take(4) {
        let out = net.infer(&s.right, &s.left)?;
        println!("{}: PSNR {:.2} dB (input {:.2} dB)", s.id, psnr(&out, &s.target, 1.0)?, psnr(&s.right, &s.target, 1.0)?);
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cfg = args.model.resolve("micro")?;
    let opts = GradCheckOptions {
        h: args.step,
        tolerance: args.tolerance,
        coords_per_param: args.coords,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&cfg, args.seed, &opts)?;
    if args.json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(report.pass)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.weights)?;
    let manifest = Manifest::load(&args.manifest)?;
    let report = evaluate(&model, &manifest);
    print!("{}", report.to_text());
    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json()?)?;
    }
    if report.images.is_empty() {
        bail!("no manifest entry could be evaluated");
    }
    Ok(())
}

/// Reported sizes of the named variants at 1120x1680: parameters and FLOPs.
fn reference_size(cfg: &ModelConfig) -> Option<(&'static str, f64, f64)> {
    let refs = [
        ("dmtnet-t", 1.23e6, 147.37e9),
        ("dmtnet-s", 12.57e6, 688.35e9),
        ("dmtnet-b", 24.46e6, 1294.41e9),
        ("dmtnet-l", 36.35e6, 1900.46e9),
        ("dmtnet-h", 48.24e6, 2506.51e9),
    ];
    refs.into_iter().find(|(name, _, _)| ModelConfig::preset(name).ok().as_ref() == Some(cfg))
}

fn count(args: &CountArgs) -> Result<()> {
    let cfg = args.model.resolve("dmtnet-b")?;
    let (h, w) = args.size;
    let report = count_params(&cfg)?;
    println!("{:<16} {:>14}", "submodule", "parameters");
    for (name, n) in &report.submodules {
        println!("{name:<16} {n:>14}");
    }
    println!("{:<16} {:>14}", "total", report.total);
    println!("{:<16} {:>14}", "per DMSSRM", report.per_dmssrm);
    let flops = model_flops(&cfg, h, w)?;
    println!("FLOPs at {h}x{w}: {:.2}G", flops as f64 / 1e9);
    if let Some((name, params, ref_flops)) = reference_size(&cfg) {
        println!(
            "reference {name}: {:.2}M parameters, {:.2}G FLOPs (measured {:.2}M, {:.2}G)",
            params / 1e6,
            ref_flops / 1e9,
            report.total as f64 / 1e6,
            flops as f64 / 1e9
        );
    }
    println!();
    println!("{:>12} {:>8} {:>6} {:>18} {:>18} {:>9} {:>9}", "tokens", "channels", "window", "MSA", "W-MSA", "ratio", "hw/3W^2");
    let stride = cfg.stem_stride();
    let rows = [(64u64, 64u64, 96u64, 8u64), ((h / stride) as u64, (w / stride) as u64, cfg.embed_dim as u64, cfg.window_size as u64)];
    for (th, tw, c, win) in rows {
        let r = complexity(th, tw, c, win)?;
        println!(
            "{:>12} {c:>8} {win:>6} {:>18} {:>18} {:>9.2} {:>9.2}",
            format!("{th}x{tw}"),
            r.omega_msa,
            r.omega_wmsa,
            r.ratio,
            r.approx_ratio
        );
    }
    Ok(())
}

fn extract(args: &PatchArgs) -> Result<()> {
    let spec = PatchSpec::new(args.size, args.overlap)?;
    let manifest = Manifest::load(&args.manifest)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut out = Manifest::default();
    for entry in &manifest.entries {
        let sample = load_sample::<f32>(entry)?;
        for (k, (top, left)) in extract_patches(sample.height(), sample.width(), &spec)?.into_iter().enumerate() {
            let patch = sample.crop(top, left, args.size)?;
            let id = format!("{}_p{k:03}", entry.id);
            let path = |kind: &str| args.out_dir.join(format!("{id}_{kind}.png"));
            save_image(&patch.left, &path("left"), BitDepth::Sixteen)?;
            save_image(&patch.right, &path("right"), BitDepth::Sixteen)?;
            save_image(&patch.target, &path("target"), BitDepth::Sixteen)?;
            out.entries.push(ManifestEntry {
                id: id.clone(),
                left: path("left"),
                right: path("right"),
                target: path("target"),
                category: entry.category,
            });
        }
    }
    std::fs::write(args.out_dir.join("manifest.tsv"), out.to_text(&args.out_dir))?;
    println!("wrote {} patches from {} images", out.entries.len(), manifest.entries.len());
    Ok(())
}

fn dump_scales(args: &DumpArgs) -> Result<()> {
    let model = load_model(&args.weights)?;
    let left = load_image::<f32>(&args.left)?;
    let right = load_image::<f32>(&args.right)?;
    let dump = dump_scale_signals(&model, &right, &left, &args.out_dir)?;
    for (i, m) in dump.trace.modules.iter().enumerate() {
        let alpha: Vec<String> = m.alpha.data().iter().map(|a| format!("{a:.4}")).collect();
        println!("DMSSRM {i}: alpha [{}]", alpha.join(", "));
    }
    println!("wrote {} and {} feature maps", dump.alpha_file.display(), dump.feature_images.len());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}=`{v}` is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match &cli.command {
        Command::Infer(a) => infer(a)?,
        Command::TrainToy(a) => train_toy(a)?,
        Command::Gradcheck(a) => {
            if !gradcheck(a)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval(a) => eval(a)?,
        Command::Count(a) => count(a)?,
        Command::ExtractPatches(a) => extract(a)?,
        Command::DumpScales(a) => dump_scales(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
