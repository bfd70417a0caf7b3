//! `camsim`: command-line front end of the raw camera simulator.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use camsim_core::dataset::{
    generate_synthetic_scene, list_sequences, parse_key_values, read_raw_file, read_sequence, synthetic_sequence,
    synthetic_settings, write_raw_file, write_sequence, RawContainer, SceneConfig, Sidecar,
};
use camsim_core::pipeline::{evaluate, load_model, save_model, simulate_stages, train, Stage};
use camsim_core::render::{
    auto_expose, default_candidate_grid, hdr_from_raw, nlf_at_iso, render_srgb, FusionConfig, HeuristicScorer,
    RgbImage,
};
use camsim_core::{
    ExposureSettings, ModelConfig, NoiseLevelFunction, RawImage, RenderParams, SceneSequence, SimulateOptions,
    SimulatorModel, StageToggles, TrainSchedule,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "camsim", version, about = "Simulate raw captures under new camera settings")]
struct Cli {
    /// key = value file supplying defaults for any long flag of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of registered sequences.
    Synth(SynthArgs),
    /// Train the exposure, noise and aperture stages, then finetune jointly.
    Train(TrainArgs),
    /// Simulate one raw file under target settings.
    Simulate(SimulateArgs),
    /// Report PSNR/SSIM per stage on a dataset.
    Eval(EvalArgs),
    /// Simulate an exposure bracket and fuse it into one preview.
    Hdr(HdrArgs),
    /// Score a grid of candidate settings and report the best.
    Autoexpose(AutoArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Mosaic side in pixels (even).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    complexity: Option<u32>,
    /// Largest blur radius at f/4, in plane pixels.
    #[arg(long)]
    max_blur: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `desk` or `full`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    exposure_epochs: Option<usize>,
    #[arg(long)]
    noise_epochs: Option<usize>,
    #[arg(long)]
    aperture_epochs: Option<usize>,
    #[arg(long)]
    joint_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug)]
struct TargetArgs {
    #[arg(long)]
    exposure_time: Option<f64>,
    #[arg(long)]
    iso: Option<f64>,
    #[arg(long)]
    f_number: Option<f64>,
    /// Target read-noise variance; scaled from the input NLF when omitted.
    #[arg(long)]
    nlf_read: Option<f64>,
    #[arg(long)]
    nlf_shot: Option<f64>,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Raw container; settings come from the sidecar `<input>.txt` or the
    /// `--in-*` flags.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    in_exposure_time: Option<f64>,
    #[arg(long)]
    in_iso: Option<f64>,
    #[arg(long)]
    in_f_number: Option<f64>,
    #[arg(long)]
    in_nlf_read: Option<f64>,
    #[arg(long)]
    in_nlf_shot: Option<f64>,
    /// Model directory; zero-initialized networks when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    target: TargetArgs,
    /// Output raw container (a sidecar is written next to it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional sRGB preview.
    #[arg(long)]
    preview: Option<PathBuf>,
    /// Comma-separated subset of exposure,noise,aperture.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    no_renoise: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Pair rule: exposure, noise, aperture or joint.
    #[arg(long)]
    pairs: Option<String>,
}

#[derive(Args, Debug)]
struct HdrArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Fused PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_renoise: bool,
}

#[derive(Args, Debug)]
struct AutoArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    no_renoise: bool,
}

/// Bad flags, missing values or unusable configuration.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Flag values fall back to the config file, then to a default.
struct Resolver {
    entries: Vec<(String, String)>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> Result<Self> {
        let entries = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| camsim_core::Error::Io { path: p.to_path_buf(), source: e })?;
                parse_key_values(&text, p)?
            }
            None => Vec::new(),
        };
        Ok(Self { entries })
    }

    fn lookup<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        let config_key = key.replace('-', "_");
        match self.entries.iter().rev().find(|(k, _)| k.replace('-', "_") == config_key) {
            Some((_, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config value `{v}` for `{key}` is invalid"))),
            None => Ok(None),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.lookup(flag, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.lookup(flag, key)?
            .ok_or_else(|| usage(format!("missing --{key} (flag or config key)")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<camsim_core::Error>() {
        Some(camsim_core::Error::Numeric(_)) => 3,
        Some(camsim_core::Error::Parameter(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let r = Resolver::load(cli.config.as_deref())?;
    let seed = r.or(cli.seed, "seed", 0u64)?;
    match cli.command {
        Command::Synth(a) => synth(&r, a, seed),
        Command::Train(a) => train_cmd(&r, a, seed),
        Command::Simulate(a) => simulate_cmd(&r, a, seed),
        Command::Eval(a) => eval_cmd(&r, a),
        Command::Hdr(a) => hdr_cmd(&r, a, seed),
        Command::Autoexpose(a) => auto_cmd(&r, a, seed),
    }
}

/// Frame settings of generated sequences: three ISOs times three
/// f-numbers, with exposure time chosen to keep the brightness constant.
fn synth_settings() -> Vec<ExposureSettings> {
    let mut out = Vec::new();
    for iso in [100.0, 400.0, 3200.0] {
        for n in [4.0, 8.0, 16.0] {
            let t = 0.02 * (100.0 / iso) * (n / 8.0) * (n / 8.0);
            out.push(synthetic_settings(t, iso, n));
        }
    }
    out
}

fn synth(r: &Resolver, a: SynthArgs, seed: u64) -> Result<()> {
    let out: PathBuf = r.required(a.out, "out")?;
    let scenes = r.or(a.scenes, "scenes", 8usize)?;
    let size = r.or(a.size, "size", 128usize)?;
    let cfg = SceneConfig {
        height: size,
        width: size,
        complexity: r.or(a.complexity, "complexity", SceneConfig::default().complexity)?,
        max_blur_radius: r.or(a.max_blur, "max-blur", 4.0)?,
    };
    let settings = synth_settings();
    let reference = synthetic_settings(0.02, 100.0, 8.0);
    for i in 0..scenes {
        let scene_seed = seed.wrapping_add(i as u64);
        let scene = generate_synthetic_scene(scene_seed, &cfg)?;
        let id = format!("scene_{i:04}");
        let seq = synthetic_sequence(&scene, &settings, &reference, scene_seed.wrapping_mul(1000), &id)?;
        write_sequence(&seq, &out.join(&id))?;
    }
    println!("wrote {scenes} sequences of {} frames to {}", settings.len(), out.display());
    Ok(())
}

fn load_sequences(dir: &Path) -> Result<Vec<SceneSequence>> {
    let paths = list_sequences(dir)?;
    if paths.is_empty() {
        return Err(camsim_core::Error::DegenerateData(format!("no sequences under {}", dir.display())).into());
    }
    Ok(paths.iter().map(|p| read_sequence(p)).collect::<camsim_core::Result<_>>()?)
}

fn train_cmd(r: &Resolver, a: TrainArgs, seed: u64) -> Result<()> {
    let data: PathBuf = r.required(a.data, "data")?;
    let out: PathBuf = r.required(a.out, "out")?;
    let base = match r.or(a.preset, "preset", "desk".to_string())?.as_str() {
        "desk" => TrainSchedule::desk(),
        "full" => TrainSchedule::full(),
        other => return Err(usage(format!("unknown preset `{other}` (desk or full)"))),
    };
    let schedule = TrainSchedule {
        exposure_epochs: r.or(a.exposure_epochs, "exposure-epochs", base.exposure_epochs)?,
        noise_epochs: r.or(a.noise_epochs, "noise-epochs", base.noise_epochs)?,
        aperture_epochs: r.or(a.aperture_epochs, "aperture-epochs", base.aperture_epochs)?,
        joint_epochs: r.or(a.joint_epochs, "joint-epochs", base.joint_epochs)?,
        batch_size: r.or(a.batch_size, "batch-size", base.batch_size)?,
        lr: r.or(a.lr, "lr", base.lr)?,
        patch_size: r.or(a.patch_size, "patch-size", base.patch_size)?,
        steps_per_epoch: r.lookup(a.steps_per_epoch, "steps-per-epoch")?,
        seed,
        ..base
    };
    let mut config = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let width = r.lookup(a.base_width, "base-width")?;
    let levels = r.lookup(a.levels, "levels")?;
    for net in [&mut config.denoiser, &mut config.aperture] {
        net.base_width = width.unwrap_or(net.base_width);
        net.levels = levels.unwrap_or(net.levels);
    }
    let sequences = load_sequences(&data)?;
    let mut model = SimulatorModel::new(config)?;
    let report = train(&mut model, &sequences, &schedule)?;
    save_model(&model, &out)?;
    println!("exposure correction: w = {:.6}, b = {:.6}", model.correction.w, model.correction.b);
    for (name, curve) in [("noise", &report.noise), ("aperture", &report.aperture), ("joint", &report.joint)] {
        if let (Some(first), Some(last)) = (curve.epochs.first(), curve.epochs.last()) {
            println!("{name}: epoch loss {first:.6} -> {last:.6} over {} epochs", curve.epochs.len());
        }
    }
    println!("model written to {}", out.display());
    Ok(())
}

fn load_or_new_model(path: Option<PathBuf>) -> Result<SimulatorModel> {
    match path {
        Some(p) => Ok(load_model(&p)?),
        None => Ok(SimulatorModel::new(ModelConfig::default())?),
    }
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("txt")
}

fn load_input(r: &Resolver, a: InputArgs) -> Result<(RawImage, SimulatorModel)> {
    let path: PathBuf = r.required(a.input, "input")?;
    let raw = read_raw_file(&path)?.to_raw()?;
    let side = sidecar_path(&path);
    let from_file = if side.is_file() {
        let text = std::fs::read_to_string(&side).map_err(|e| camsim_core::Error::Io {
            path: side.clone(),
            source: e,
        })?;
        Some(Sidecar::parse(&text, &side)?.settings)
    } else {
        None
    };
    let settings = match from_file {
        Some(s) => ExposureSettings {
            exposure_time: r.or(a.in_exposure_time, "in-exposure-time", s.exposure_time)?,
            iso: r.or(a.in_iso, "in-iso", s.iso)?,
            f_number: r.or(a.in_f_number, "in-f-number", s.f_number)?,
            nlf: NoiseLevelFunction {
                read: r.or(a.in_nlf_read, "in-nlf-read", s.nlf.read)?,
                shot: r.or(a.in_nlf_shot, "in-nlf-shot", s.nlf.shot)?,
            },
        },
        None => {
            let iso = r.required(a.in_iso, "in-iso")?;
            let synthetic = synthetic_settings(1.0, iso, 8.0).nlf;
            ExposureSettings {
                exposure_time: r.required(a.in_exposure_time, "in-exposure-time")?,
                iso,
                f_number: r.required(a.in_f_number, "in-f-number")?,
                nlf: NoiseLevelFunction {
                    read: r.or(a.in_nlf_read, "in-nlf-read", synthetic.read)?,
                    shot: r.or(a.in_nlf_shot, "in-nlf-shot", synthetic.shot)?,
                },
            }
        }
    };
    settings.validate()?;
    let model_path = r.lookup(a.model, "model")?;
    Ok((raw.with_settings(settings), load_or_new_model(model_path)?))
}

fn target_settings(r: &Resolver, a: TargetArgs, source: &ExposureSettings) -> Result<ExposureSettings> {
    let iso = r.or(a.iso, "iso", source.iso)?;
    let scaled = nlf_at_iso(&source.nlf, source.iso, iso);
    let s = ExposureSettings {
        exposure_time: r.or(a.exposure_time, "exposure-time", source.exposure_time)?,
        iso,
        f_number: r.or(a.f_number, "f-number", source.f_number)?,
        nlf: NoiseLevelFunction {
            read: r.or(a.nlf_read, "nlf-read", scaled.read)?,
            shot: r.or(a.nlf_shot, "nlf-shot", scaled.shot)?,
        },
    };
    s.validate()?;
    Ok(s)
}

fn parse_stages(spec: &str) -> Result<StageToggles> {
    let mut t = StageToggles {
        exposure: false,
        noise: false,
        aperture: false,
    };
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "exposure" => t.exposure = true,
            "noise" => t.noise = true,
            "aperture" => t.aperture = true,
            "all" => t = StageToggles::default(),
            other => return Err(usage(format!("unknown stage `{other}`"))),
        }
    }
    Ok(t)
}

fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .context("preview buffer has the wrong size")?;
    buf.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn simulate_cmd(r: &Resolver, a: SimulateArgs, seed: u64) -> Result<()> {
    let (raw, mut model) = load_input(r, a.input)?;
    let target = target_settings(r, a.target, &raw.settings)?;
    let stages = match r.lookup(a.stages, "stages")? {
        Some(s) => parse_stages(&s)?,
        None => StageToggles::default(),
    };
    let renoise = !(a.no_renoise || r.or(None, "no-renoise", false)?);
    let options = SimulateOptions { stages, renoise, seed };
    let out = simulate_stages(&mut model, &raw, &target, &options)?.output;
    let out_path: Option<PathBuf> = r.lookup(a.out, "out")?;
    let preview: Option<PathBuf> = r.lookup(a.preview, "preview")?;
    if out_path.is_none() && preview.is_none() {
        return Err(usage("nothing to write: give --out and/or --preview"));
    }
    if let Some(p) = out_path {
        write_raw_file(&p, &RawContainer::from_raw(&out)?)?;
        let side = Sidecar {
            settings: target,
            camera_id: "simulated".into(),
            scene_id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            extra: vec![("seed".into(), seed.to_string())],
        };
        let sp = sidecar_path(&p);
        std::fs::write(&sp, side.to_text()).map_err(|e| camsim_core::Error::Io { path: sp, source: e })?;
        println!("wrote {}", p.display());
    }
    if let Some(p) = preview {
        write_png(&p, &render_srgb(&out, &RenderParams::default())?)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn eval_cmd(r: &Resolver, a: EvalArgs) -> Result<()> {
    let data: PathBuf = r.required(a.data, "data")?;
    let stage = match r.or(a.pairs, "pairs", "joint".to_string())?.as_str() {
        "exposure" => Stage::Exposure,
        "noise" => Stage::Noise,
        "aperture" => Stage::Aperture,
        "joint" => Stage::Joint,
        other => return Err(usage(format!("unknown pair rule `{other}`"))),
    };
    let mut model = load_or_new_model(r.lookup(a.model, "model")?)?;
    let report = evaluate(&mut model, &load_sequences(&data)?, stage)?;
    println!("{} pairs ({} rule)", report.pairs, stage.name());
    print!("{}", report.to_table());
    Ok(())
}

fn hdr_cmd(r: &Resolver, a: HdrArgs, seed: u64) -> Result<()> {
    let (raw, mut model) = load_input(r, a.input)?;
    let out: PathBuf = r.required(a.out, "out")?;
    let options = SimulateOptions {
        renoise: !(a.no_renoise || r.or(None, "no-renoise", false)?),
        seed,
        ..SimulateOptions::default()
    };
    let hdr = hdr_from_raw(&mut model, &raw, &RenderParams::default(), &FusionConfig::default(), &options)?;
    write_png(&out, &hdr.fused)?;
    println!("fused {} bracket frames into {}", hdr.frames.len(), out.display());
    Ok(())
}

fn auto_cmd(r: &Resolver, a: AutoArgs, seed: u64) -> Result<()> {
    let (raw, model) = load_input(r, a.input)?;
    let options = SimulateOptions {
        renoise: !(a.no_renoise || r.or(None, "no-renoise", false)?),
        seed,
        ..SimulateOptions::default()
    };
    let candidates = default_candidate_grid(&raw.settings);
    let result = auto_expose(&model, &raw, &candidates, &HeuristicScorer::default(), &options)?;
    println!("{:>4} {:>12} {:>8} {:>6} {:>10}", "#", "time_s", "iso", "f", "score");
    for (i, st) in result.table.iter().enumerate() {
        let s = st.settings;
        println!(
            "{i:>4} {:>12.6} {:>8.0} {:>6.2} {:>10.5}",
            s.exposure_time, s.iso, s.f_number, st.score
        );
    }
    let b = result.best.settings;
    println!(
        "best: #{} exposure_time={} iso={} f_number={} score={:.5}",
        result.best_index, b.exposure_time, b.iso, b.f_number, result.best.score
    );
    Ok(())
}
