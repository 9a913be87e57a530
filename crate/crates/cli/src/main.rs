//! `dcanet`: train, run and inspect the dual-branch attention denoiser.

mod settings;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use dcanet_core::data::{load_image, save_image, to_grayscale, DatasetManifest, ImageBuffer, ManifestMode, Split};
use dcanet_core::metrics::{
    bench_pairs, bench_run, count_macs, count_params, gridding_probe, lower_branch_layers, psnr, receptive_field,
    ssim, upper_branch_layers, BenchReport, Denoiser,
};
use dcanet_core::model::{Dcanet, Extent, ModelConfig, Variant};
use dcanet_core::probe::{determinism_probe, gradcheck_suite};
use dcanet_core::train::{make_checkpoint, restore_checkpoint, train_loop, Adam, Checkpoint, Progress, TrainData};
use dcanet_core::Tensor;

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "dcanet", version, about = "Blind image denoising with a dual CNN and attention")]
struct Cli {
    /// Worker threads for convolution and data preparation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a manifest (or generated scenes).
    Train(TrainArgs),
    /// Denoise one image.
    Denoise(DenoiseArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Write the estimated noise map of an image as a heat image.
    Estimate(EstimateArgs),
    /// Print parameter and MAC counts, receptive fields and the layer inventory.
    Info(InfoArgs),
    /// Run an executable invariant suite.
    Probe(ProbeArgs),
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// JSON file with flat settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale preset (48×48 patches, batch 4, 500 iterations).
    #[arg(long)]
    desk: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(clap::Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Clean image; prints PSNR and SSIM of the result against it.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Noise levels for clean-only manifests.
    #[arg(long, value_delimiter = ',', default_values_t = [15.0, 25.0, 50.0])]
    sigmas: Vec<f64>,
    #[arg(long, env = "DCANET_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write per-image rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// RGB heat image of the per-pixel noise level.
    #[arg(long)]
    output: PathBuf,
}

#[derive(clap::Args, Debug)]
struct InfoArgs {
    /// Describe the model stored here instead of a fresh one.
    #[arg(long, conflicts_with_all = ["config", "variant", "in_channels", "width"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Image size for the MAC count, as HxW.
    #[arg(long, default_value = "256x256", value_parser = parse_shape)]
    shape: (usize, usize),
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h = h.trim().parse().map_err(|e| format!("{e}"))?;
    let w = w.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((h, w))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeKind {
    Gradcheck,
    Gridding,
    Determinism,
}

#[derive(clap::Args, Debug)]
struct ProbeArgs {
    #[arg(value_enum)]
    kind: ProbeKind,
    #[arg(long, env = "DCANET_SEED", default_value_t = 0)]
    seed: u64,
    /// Iterations per run for the determinism probe.
    #[arg(long, default_value_t = 50)]
    iters: u64,
}

/// Bad invocation of a subcommand: reported with its usage and exit code 2.
#[derive(Debug)]
struct UsageError(&'static str, String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for UsageError {}

fn usage(subcommand: &'static str, msg: impl Into<String>) -> anyhow::Error {
    UsageError(subcommand, msg.into()).into()
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("DCANET_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| usage("train", format!("DCANET_SEED=`{v}` is not an integer")))?)),
        Err(_) => Ok(None),
    }
}

fn load_model(path: &Path) -> anyhow::Result<Dcanet<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(restore_checkpoint(&ck)?.model)
}

fn check_channels(model: &Dcanet<f32>, img: &ImageBuffer, path: &Path) -> anyhow::Result<()> {
    let want = model.config().in_channels;
    if img.channels() != want {
        bail!(
            "{} has {} channel(s) but the model expects {want}",
            path.display(),
            img.channels()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut s = if args.desk { Settings::desk() } else { Settings::default() };
    if let Some(path) = &args.config {
        s.overlay(&Settings::from_file(path)?);
    }
    s.overlay(&args.settings);
    let seed = s.seed.or(env_seed()?).unwrap_or(0);
    s.seed = Some(seed);

    let data = match (&s.manifest, s.synthetic) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(usage("train", format!("manifest `{}` does not exist", path.display())));
            }
            let m = DatasetManifest::load(path)?;
            let channels = s.in_channels.unwrap_or(1);
            TrainData::from_manifest(&m, Split::Train, channels)?
        }
        (None, Some(n)) if n > 0 => {
            let channels = s.in_channels.unwrap_or(1);
            let size = s.patch.unwrap_or(48).max(16) * 2;
            TrainData::Synthetic(
                (0..n as u64)
                    .map(|i| dcanet_core::data::synthetic_image(channels, size, size, seed.wrapping_add(i)))
                    .collect::<Result<_, _>>()?,
            )
        }
        _ => return Err(usage("train", "train needs --manifest <PATH> (or --synthetic <N>)")),
    };
    if matches!(data, TrainData::Paired(_)) && s.mode != Some(settings::NoiseMode::Real) {
        warn!("paired manifest without `--mode real`; training on the pairs with the squared-error loss");
    }

    let out = s.checkpoint_dir.clone().unwrap_or_else(|| PathBuf::from("dcanet-run"));
    s.checkpoint_dir = Some(out.clone());
    let mut cfg = s.train_config(seed)?;
    s = s.resolved(&s.model_config()?, &cfg);
    info!("effective config: {}", serde_json::to_string(&s)?);

    cfg.checkpoint_dir = Some(out.clone());
    cfg.log_path = Some(out.join("train.log"));

    let (mut model, mut adam, start) = match &args.resume {
        Some(path) => {
            let r = restore_checkpoint(&Checkpoint::load(path)?)?;
            let adam = r.adam.unwrap_or_else(|| Adam::new(r.model.params()));
            let start = r.progress.map(|p| p.iter).unwrap_or(0);
            info!("resuming {} at iteration {start}", path.display());
            (r.model, adam, start)
        }
        None => {
            let model = Dcanet::new(s.model_config()?, seed)?;
            let adam = Adam::new(model.params());
            (model, adam, 0)
        }
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&s)? + "\n")?;
    if start == 0 {
        let _ = std::fs::remove_file(out.join("train.log"));
    }
    info!(
        "training {} ({} parameters) for {} iterations on {} images",
        model.config().variant,
        count_params(&model),
        cfg.iters.saturating_sub(start),
        data.len()
    );
    let records = train_loop(&mut model, &mut adam, &data, &cfg, start, |_| {})?;
    let iter = records.last().map(|r| r.iter).unwrap_or(start);
    let final_path = out.join("final.dcan");
    make_checkpoint(&model, Some(&adam), Some(Progress { iter, seed }))?.save(&final_path)?;
    if let Some(r) = records.last() {
        println!("iter {} loss {:.6}", r.iter, r.loss);
    }
    println!("saved {}", final_path.display());
    Ok(())
}

fn cmd_denoise(args: DenoiseArgs) -> anyhow::Result<()> {
    let mut model = load_model(&args.checkpoint)?;
    let img = load_image(&args.input)?;
    check_channels(&model, &img, &args.input)?;
    let out = model.denoise(&img)?;
    save_image(&out, &args.output)?;
    if let Some(r) = &args.reference {
        let clean = load_image(r)?;
        println!("psnr_db {:.4}", psnr(&out, &clean)?);
        println!("ssim {:.6}", ssim(&out.clamped(), &clean)?);
    }
    Ok(())
}

fn convert_for(model_channels: usize, img: ImageBuffer, path: &Path) -> anyhow::Result<ImageBuffer> {
    match (model_channels, img.channels()) {
        (1, 3) => Ok(to_grayscale(&img)),
        (c, k) if c == k => Ok(img),
        (c, k) => Err(anyhow!("{}: {k}-channel image for a {c}-channel model", path.display())),
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    if !args.manifest.is_file() {
        return Err(usage("eval", format!("manifest `{}` does not exist", args.manifest.display())));
    }
    let mut model = load_model(&args.checkpoint)?;
    let channels = model.config().in_channels;
    let m = DatasetManifest::parse(&args.manifest)?;
    let entries: Vec<_> = m.split(args.split.into()).cloned().collect();
    if entries.is_empty() {
        bail!("manifest has no {:?} entries", args.split);
    }
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut failed = 0usize;
    let report: BenchReport = match m.mode {
        ManifestMode::Synthetic => {
            let mut images = Vec::new();
            for e in &entries {
                match load_image(&e.clean).map_err(anyhow::Error::from).and_then(|i| convert_for(channels, i, &e.clean)) {
                    Ok(img) => images.push((name(&e.clean), img)),
                    Err(err) => {
                        warn!("skipping: {err}");
                        failed += 1;
                    }
                }
            }
            bench_run(&mut model, &images, &args.sigmas, args.seed)?
        }
        ManifestMode::Paired => {
            let mut pairs = Vec::new();
            for e in &entries {
                let noisy = e.noisy.as_ref().expect("paired manifest");
                let pair = (|| -> anyhow::Result<_> {
                    let y = convert_for(channels, load_image(noisy)?, noisy)?;
                    let x = convert_for(channels, load_image(&e.clean)?, &e.clean)?;
                    Ok((name(noisy), y, x))
                })();
                match pair {
                    Ok(p) => pairs.push(p),
                    Err(err) => {
                        warn!("skipping: {err}");
                        failed += 1;
                    }
                }
            }
            bench_pairs(&mut model, &pairs)?
        }
    };
    if report.rows.is_empty() {
        bail!("no image of the split could be evaluated");
    }
    print!("{}", report.to_table());
    if failed > 0 {
        println!("{failed} entr{} skipped", if failed == 1 { "y" } else { "ies" });
    }
    if let Some(p) = &args.csv {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Blue → green → yellow → red ramp over `[0, 1]`.
fn heat(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.6, 1.0], [0.2, 0.9, 0.2], [1.0, 0.9, 0.0], [0.8, 0.0, 0.0]];
    let x = t * (stops.len() - 1) as f32;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f32;
    std::array::from_fn(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

fn cmd_estimate(args: EstimateArgs) -> anyhow::Result<()> {
    let mut model = load_model(&args.checkpoint)?;
    let img = load_image(&args.input)?;
    check_channels(&model, &img, &args.input)?;
    let map: Tensor<f32> = model.estimate_noise(&img.to_tensor())?;
    let (_, c, h, w) = map.nchw()?;
    let plane = h * w;
    let level: Vec<f32> = (0..plane)
        .map(|p| (0..c).map(|ch| map.data()[ch * plane + p].abs()).sum::<f32>() / c as f32)
        .collect();
    let peak = level.iter().copied().fold(0.0f32, f32::max);
    let mut rgb = vec![0.0f32; 3 * plane];
    for (p, &v) in level.iter().enumerate() {
        let col = heat(if peak > 0.0 { v / peak } else { 0.0 });
        for ch in 0..3 {
            rgb[ch * plane + p] = col[ch];
        }
    }
    save_image(&ImageBuffer::new(3, h, w, rgb)?, &args.output)?;
    let mean = level.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
    println!("mean_level {:.6}", mean);
    println!("max_level {:.6}", peak);
    Ok(())
}

fn cmd_info(args: InfoArgs) -> anyhow::Result<()> {
    let model: Dcanet<f32> = match &args.checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let mut s = match &args.config {
                Some(p) => Settings::from_file(p)?,
                None => Settings::default(),
            };
            s.overlay(&Settings {
                variant: args.variant,
                in_channels: args.in_channels,
                width: args.width,
                ..Default::default()
            });
            Dcanet::new(s.model_config()?, 0)?
        }
    };
    let cfg: &ModelConfig = model.config();
    let (h, w) = args.shape;
    let macs = count_macs(&model, h, w);
    println!("variant: {} (ablation row {})", cfg.variant, cfg.variant.ablation_row());
    println!("in_channels: {}", cfg.in_channels);
    println!("width: {}", cfg.width);
    println!("parameters: {}", count_params(&model));
    println!("macs@{h}x{w}: {macs} ({:.3} G)", macs as f64 / 1e9);
    if cfg.variant.has_upper() {
        println!("receptive_field.upper: {}", receptive_field(&upper_branch_layers(cfg)));
    }
    if cfg.variant.has_lower() {
        println!("receptive_field.lower: {}", receptive_field(&lower_branch_layers(cfg)));
        let rates: Vec<String> = cfg.lower_rates.iter().map(|r| r.to_string()).collect();
        println!("dilation_rates: {}", rates.join(","));
    }
    println!("layers:");
    println!(
        "  {:<24} {:<9} {:>4} {:>4} {:>2} {:>2} {:>7} {:>8}",
        "name", "kind", "in", "out", "k", "d", "extent", "params"
    );
    for l in model.inventory() {
        let extent = match l.extent {
            Extent::Level(0) => "full".to_string(),
            Extent::Level(k) => format!("1/{}", 1 << k),
            Extent::Global => "global".to_string(),
        };
        println!(
            "  {:<24} {:<9} {:>4} {:>4} {:>2} {:>2} {:>7} {:>8}",
            l.name,
            format!("{:?}", l.kind).to_lowercase(),
            l.in_channels,
            l.out_channels,
            l.kernel,
            l.dilation,
            extent,
            l.params
        );
    }
    Ok(())
}

/// Prints one JSON object per line; returns whether everything passed.
fn cmd_probe(args: ProbeArgs) -> anyhow::Result<bool> {
    match args.kind {
        ProbeKind::Gradcheck => {
            let cases = gradcheck_suite(args.seed);
            let mut ok = true;
            for c in &cases {
                let pass = c.report.passed();
                ok &= pass;
                let failures: Vec<_> = c
                    .report
                    .failures()
                    .map(|e| {
                        serde_json::json!({
                            "input": e.input, "index": e.index,
                            "analytic": e.analytic, "numeric": e.numeric, "rel_err": e.rel_err,
                        })
                    })
                    .collect();
                println!(
                    "{}",
                    serde_json::json!({
                        "check": c.name, "pass": pass, "coords": c.report.entries.len(),
                        "max_rel_err": c.report.max_rel_err(), "tolerance": c.report.tolerance,
                        "error": c.report.error, "failures": failures,
                    })
                );
            }
            println!("{}", serde_json::json!({"probe": "gradcheck", "cases": cases.len(), "pass": ok}));
            Ok(ok)
        }
        ProbeKind::Gridding => {
            let hdc = gridding_probe(&ModelConfig::gray(), 2)?;
            let control = gridding_probe(
                &ModelConfig {
                    lower_rates: vec![2; 16],
                    ..ModelConfig::gray()
                },
                2,
            )?;
            let ok = hdc.density == 1.0 && hdc.outside == 0 && control.density < 1.0;
            for (name, r) in [("hdc", &hdc), ("constant_rate_2", &control)] {
                println!(
                    "{}",
                    serde_json::json!({
                        "rates": name, "receptive_field": r.receptive_field,
                        "reached": r.reached, "outside": r.outside, "density": r.density,
                    })
                );
            }
            println!("{}", serde_json::json!({"probe": "gridding", "pass": ok}));
            Ok(ok)
        }
        ProbeKind::Determinism => {
            let r = determinism_probe(args.seed, args.iters)?;
            let ok = r.identical();
            println!(
                "{}",
                serde_json::json!({
                    "probe": "determinism", "iters": r.first.len(), "pass": ok,
                    "first_divergence": r.first_divergence(),
                    "final_loss": r.first.last().map(|x| x.loss),
                })
            );
            Ok(ok)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("", "--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Denoise(a) => cmd_denoise(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Estimate(a) => cmd_estimate(a).map(|_| true),
        Command::Info(a) => cmd_info(a).map(|_| true),
        Command::Probe(a) => cmd_probe(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                let mut cmd = Cli::command();
                let cmd = match cmd.find_subcommand_mut(u.0) {
                    Some(sub) => sub.clone().bin_name(format!("dcanet {}", u.0)),
                    None => cmd,
                };
                cmd.clone().error(clap::error::ErrorKind::MissingRequiredArgument, u.to_string()).exit();
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
