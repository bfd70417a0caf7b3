//! End-to-end simulator: exposure, noise and aperture stages followed by
//! re-noising with the output NLF, plus staged training, evaluation and
//! model bundles.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aperture::{aperture_conditioning, aperture_forward, train_aperture, ApertureNet, AperturePair};
use crate::dataset::{format_key_values, parse_key_values, SceneSequence};
use crate::error::{Error, Result};
use crate::exposure::{apply_exposure, compute_alpha, fit_exposure_correction, ExposureCorrection, ExposurePair};
use crate::nn::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use crate::nn::layers::Module;
use crate::nn::ops::{concat_channels, l1_loss, split_channels};
use crate::nn::optim::{adam_step, AdamConfig};
use crate::nn::tensor::Tensor;
use crate::nn::unet::UNetConfig;
use crate::noise::{
    denoise, denoiser_input, image_tensor, is_denoiser_target_iso, noise_level_map, propagate_nlf, synthesize_noise,
    train_denoiser, DenoisePair, DenoiserNet, NlfPropagation,
};
use crate::raw::{compute_psnr, compute_ssim, ExposureSettings, RawImage, PLANES};
use crate::training::{crop_tensor, LossCurve, StageSchedule};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageToggles {
    pub exposure: bool,
    pub noise: bool,
    pub aperture: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            exposure: true,
            noise: true,
            aperture: true,
        }
    }
}

/// Per-call options of [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulateOptions {
    pub stages: StageToggles,
    /// Add noise from the target NLF to the final output.
    pub renoise: bool,
    pub seed: u64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            stages: StageToggles::default(),
            renoise: true,
            seed: 0,
        }
    }
}

/// Static configuration of a [`SimulatorModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub denoiser: UNetConfig,
    pub aperture: UNetConfig,
    pub nlf_propagation: NlfPropagation,
    /// Seed of the network initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserNet::default_config(),
            aperture: ApertureNet::default_config(),
            nlf_propagation: NlfPropagation::ScaledSignal,
            seed: 0,
        }
    }
}

/// All learned state of the simulator.
#[derive(Debug, Clone)]
pub struct SimulatorModel {
    pub config: ModelConfig,
    pub correction: ExposureCorrection,
    pub denoiser: DenoiserNet,
    pub aperture: ApertureNet,
}

impl SimulatorModel {
    /// Identity correction and zero-output networks.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            config,
            correction: ExposureCorrection::default(),
            denoiser: DenoiserNet::with_config(config.denoiser, config.seed)?,
            aperture: ApertureNet::with_config(config.aperture, config.seed.wrapping_add(1))?,
        })
    }
}

/// Intermediate images of one simulation.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub exposure: RawImage,
    pub denoised: RawImage,
    pub aperture: RawImage,
    pub output: RawImage,
}

/// Runs every enabled stage. Disabled stages pass their input through.
pub fn simulate_stages(
    model: &mut SimulatorModel,
    raw_in: &RawImage,
    target: &ExposureSettings,
    options: &SimulateOptions,
) -> Result<StageOutputs> {
    target.validate()?;
    let source = raw_in.settings;
    let alpha = compute_alpha(&source, target)?;
    let (exposed, gain) = if options.stages.exposure {
        (
            apply_exposure(raw_in, alpha, &model.correction, target)?,
            alpha * model.correction.w,
        )
    } else {
        (raw_in.clone().with_settings(*target), 1.0)
    };
    let denoised = if options.stages.noise {
        let nlf = propagate_nlf(source.nlf, gain, model.config.nlf_propagation)?;
        let nlm = noise_level_map(&exposed, &nlf)?;
        denoise(&exposed, &nlm, &mut model.denoiser)?
    } else {
        exposed.clone()
    };
    let apertured = if options.stages.aperture {
        aperture_forward(&denoised, source.f_number, target.f_number, &mut model.aperture)?
    } else {
        denoised.clone()
    };
    let output = if options.renoise {
        synthesize_noise(&apertured, &target.nlf, options.seed)?
    } else {
        apertured.clone()
    };
    Ok(StageOutputs {
        exposure: exposed,
        denoised,
        aperture: apertured,
        output,
    })
}

/// Simulates `raw_in` (labelled with its capture settings) as captured
/// under `target`.
pub fn simulate(
    model: &mut SimulatorModel,
    raw_in: &RawImage,
    target: &ExposureSettings,
    options: &SimulateOptions,
) -> Result<RawImage> {
    Ok(simulate_stages(model, raw_in, target, options)?.output)
}

/// Training stage a pair is selected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Exposure,
    Noise,
    Aperture,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Exposure => "exposure",
            Stage::Noise => "noise",
            Stage::Aperture => "aperture",
            Stage::Joint => "joint",
        }
    }

    /// Whether an ordered pair of settings is usable for this stage.
    pub fn accepts(self, input: &ExposureSettings, target: &ExposureSettings) -> bool {
        match self {
            Stage::Exposure => true,
            Stage::Noise => is_denoiser_target_iso(target.iso),
            Stage::Aperture => target.f_number < input.f_number,
            Stage::Joint => is_denoiser_target_iso(target.iso) && target.f_number <= input.f_number,
        }
    }
}

/// Ordered pair of frames of one sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairRef {
    pub scene_id: String,
    pub input: usize,
    pub target: usize,
}

/// All ordered pairs of distinct frames accepted by `stage`, sorted by
/// scene id and frame indices.
pub fn select_pairs(sequences: &[SceneSequence], stage: Stage) -> Vec<PairRef> {
    let mut out = Vec::new();
    for seq in sequences {
        for (i, a) in seq.frames.iter().enumerate() {
            for (j, b) in seq.frames.iter().enumerate() {
                if i != j && stage.accepts(&a.settings, &b.settings) {
                    out.push(PairRef {
                        scene_id: seq.scene_id.clone(),
                        input: i,
                        target: j,
                    });
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Epoch counts and optimizer settings of a full training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    /// 0 skips the exposure fit; any positive value runs it (the fit is
    /// solved to convergence rather than by epochs).
    pub exposure_epochs: usize,
    pub noise_epochs: usize,
    pub aperture_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_divisor: f64,
    pub patch_size: usize,
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainSchedule {
    /// 5 / 30 / 30 epochs then 10 joint epochs.
    pub fn full() -> Self {
        Self {
            exposure_epochs: 5,
            noise_epochs: 30,
            aperture_epochs: 30,
            joint_epochs: 10,
            batch_size: 2,
            lr: 1e-3,
            lr_decay_every: 20,
            lr_decay_divisor: 10.0,
            patch_size: 64,
            steps_per_epoch: None,
            seed: 0,
        }
    }

    /// 2 / 6 / 6 + 2 epochs for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            exposure_epochs: 2,
            noise_epochs: 6,
            aperture_epochs: 6,
            joint_epochs: 2,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage(0, 0).validate()
    }

    pub fn stage(&self, epochs: usize, salt: u64) -> StageSchedule {
        StageSchedule {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_every: self.lr_decay_every,
            lr_decay_divisor: self.lr_decay_divisor,
            patch_size: self.patch_size,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt),
        }
    }
}

/// Logged outcome of [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub exposure_objective: Vec<f64>,
    pub noise: LossCurve,
    pub aperture: LossCurve,
    pub joint: LossCurve,
}

struct Frames<'a> {
    seqs: Vec<(&'a SceneSequence, Vec<RawImage>)>,
}

impl<'a> Frames<'a> {
    fn new(sequences: &'a [SceneSequence]) -> Result<Self> {
        let seqs = sequences
            .iter()
            .map(|s| {
                s.validate()?;
                Ok((s, s.images()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seqs })
    }

    fn pair(&self, p: &PairRef) -> (&RawImage, &RawImage) {
        let (_, imgs) = self
            .seqs
            .iter()
            .find(|(s, _)| s.scene_id == p.scene_id)
            .expect("pair refers to a known sequence");
        (&imgs[p.input], &imgs[p.target])
    }
}

fn require(pairs: Vec<PairRef>, stage: Stage) -> Result<Vec<PairRef>> {
    if pairs.is_empty() {
        return Err(Error::degenerate(format!("{} stage has no training pairs", stage.name())));
    }
    Ok(pairs)
}

fn exposure_input(model: &SimulatorModel, input: &RawImage, target: &RawImage) -> Result<(RawImage, f64)> {
    let alpha = compute_alpha(&input.settings, &target.settings)?;
    let exposed = apply_exposure(input, alpha, &model.correction, &target.settings)?;
    Ok((exposed, alpha * model.correction.w))
}

fn denoise_pair(model: &SimulatorModel, input: &RawImage, target: &RawImage) -> Result<DenoisePair> {
    let (exposed, gain) = exposure_input(model, input, target)?;
    let nlf = propagate_nlf(input.settings.nlf, gain, model.config.nlf_propagation)?;
    Ok(DenoisePair {
        noise_map: noise_level_map(&exposed, &nlf)?,
        input: exposed,
        target: target.clone(),
    })
}

/// Trains the stages in order (exposure, noise, aperture), then finetunes
/// both networks jointly with the exposure correction held fixed.
pub fn train(model: &mut SimulatorModel, sequences: &[SceneSequence], schedule: &TrainSchedule) -> Result<TrainReport> {
    schedule.validate()?;
    let frames = Frames::new(sequences)?;
    let mut report = TrainReport::default();

    if schedule.exposure_epochs > 0 {
        let refs = require(select_pairs(sequences, Stage::Exposure), Stage::Exposure)?;
        let pairs = refs
            .iter()
            .map(|p| {
                let (a, b) = frames.pair(p);
                Ok(ExposurePair {
                    input: a,
                    target: b,
                    alpha: compute_alpha(&a.settings, &b.settings)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_exposure_correction(&pairs)?;
        log::info!("exposure fit: w = {}, b = {}", fit.correction.w, fit.correction.b);
        model.correction = fit.correction;
        report.exposure_objective = fit.objective_history;
    }

    if schedule.noise_epochs > 0 {
        let refs = require(select_pairs(sequences, Stage::Noise), Stage::Noise)?;
        let pairs = refs
            .iter()
            .map(|p| {
                let (a, b) = frames.pair(p);
                denoise_pair(model, a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        report.noise = train_denoiser(&pairs, &mut model.denoiser, &schedule.stage(schedule.noise_epochs, 1))?;
        log::info!("noise stage: final epoch loss {:?}", report.noise.epochs.last());
    }

    if schedule.aperture_epochs > 0 {
        let refs = require(select_pairs(sequences, Stage::Aperture), Stage::Aperture)?;
        let mut pairs = Vec::with_capacity(refs.len());
        for p in &refs {
            let (a, b) = frames.pair(p);
            let dp = denoise_pair(model, a, b)?;
            let denoised = denoise(&dp.input, &dp.noise_map, &mut model.denoiser)?;
            pairs.push(AperturePair {
                input: denoised,
                target: b.clone(),
                n_in: a.settings.f_number,
                n_out: b.settings.f_number,
            });
        }
        report.aperture = train_aperture(&pairs, &mut model.aperture, &schedule.stage(schedule.aperture_epochs, 2))?;
        log::info!("aperture stage: final epoch loss {:?}", report.aperture.epochs.last());
    }

    if schedule.joint_epochs > 0 {
        let refs = require(select_pairs(sequences, Stage::Joint), Stage::Joint)?;
        let samples = refs
            .iter()
            .map(|p| {
                let (a, b) = frames.pair(p);
                JointSample::new(model, a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        report.joint = train_joint(model, &samples, &schedule.stage(schedule.joint_epochs, 3))?;
        log::info!("joint finetune: final epoch loss {:?}", report.joint.epochs.last());
    }
    Ok(report)
}

struct JointSample {
    denoiser_input: Tensor,
    exposed: Tensor,
    target: Tensor,
    n_in: f64,
    n_out: f64,
}

impl JointSample {
    fn new(model: &SimulatorModel, input: &RawImage, target: &RawImage) -> Result<Self> {
        let dp = denoise_pair(model, input, target)?;
        Ok(Self {
            denoiser_input: denoiser_input(&dp.input, &dp.noise_map)?,
            exposed: image_tensor(&dp.input),
            target: image_tensor(target),
            n_in: input.settings.f_number,
            n_out: target.settings.f_number,
        })
    }
}

/// One joint step: `out = ns + A(ns ⊕ n)` with `ns = clip(exp + D(exp ⊕
/// map))`, L1 against the target, gradients through both networks.
fn joint_step(
    model: &mut SimulatorModel,
    den_in: &Tensor,
    exposed: &Tensor,
    target: &Tensor,
    ns_to_input: impl Fn(&Tensor) -> Result<Tensor>,
    cond: &[[f64; 2]],
) -> Result<f64> {
    let d_res = model.denoiser.unet_mut().forward(den_in, &vec![[0.0, 0.0]; den_in.batch()])?;
    let pre = exposed.add(&d_res)?;
    let ns = pre.map(|v| v.clamp(0.0, 1.0));
    let a_in = ns_to_input(&ns)?;
    let a_res = model.aperture.unet_mut().forward(&a_in, cond)?;
    let out = ns.add(&a_res)?;
    let (loss, g) = l1_loss(&out, target, None)?;
    let g_ain = model.aperture.unet_mut().backward(&g)?;
    let (g_ns_from_a, _) = split_channels(&g_ain, PLANES)?;
    let mut g_ns = g.add(&g_ns_from_a)?;
    for (gv, &p) in g_ns.data_mut().iter_mut().zip(pre.data()) {
        if !(p > 0.0 && p < 1.0) {
            *gv = 0.0;
        }
    }
    model.denoiser.unet_mut().backward(&g_ns)?;
    Ok(loss)
}

fn train_joint(model: &mut SimulatorModel, samples: &[JointSample], schedule: &StageSchedule) -> Result<LossCurve> {
    schedule.validate()?;
    let multiple = model
        .denoiser
        .unet()
        .config()
        .size_multiple()
        .max(model.aperture.unet().config().size_multiple());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let steps = schedule
        .steps_per_epoch
        .unwrap_or_else(|| samples.len().div_ceil(schedule.batch_size))
        .max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut curve = LossCurve::default();
    for epoch in 0..schedule.epochs {
        let cfg = AdamConfig {
            lr: schedule.lr_at(epoch),
            ..AdamConfig::default()
        };
        let mut total = 0.0;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(schedule.batch_size);
            while batch.len() < schedule.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let min_h = batch.iter().map(|&i| samples[i].exposed.height()).min().unwrap_or(0);
            let min_w = batch.iter().map(|&i| samples[i].exposed.width()).min().unwrap_or(0);
            let ph = schedule.patch_size.min(min_h) / multiple * multiple;
            let pw = schedule.patch_size.min(min_w) / multiple * multiple;
            if ph == 0 || pw == 0 {
                return Err(Error::dim("images too small for joint training crops"));
            }
            let (mut di, mut ex, mut tg, mut conds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in &batch {
                let s = &samples[i];
                let row = rng.random_range(0..=s.exposed.height() - ph);
                let col = rng.random_range(0..=s.exposed.width() - pw);
                di.push(crop_tensor(&s.denoiser_input, row, col, ph, pw));
                ex.push(crop_tensor(&s.exposed, row, col, ph, pw));
                tg.push(crop_tensor(&s.target, row, col, ph, pw));
                conds.push((s.n_in, s.n_out));
            }
            let (di, ex, tg) = (Tensor::stack(&di)?, Tensor::stack(&ex)?, Tensor::stack(&tg)?);
            let cond: Vec<[f64; 2]> = conds
                .iter()
                .map(|&(a, b)| aperture_conditioning(a, b))
                .collect();
            let planes = |ns: &Tensor| -> Result<Tensor> {
                let [n, h, w, _] = ns.shape();
                let extra = Tensor::from_fn([n, h, w, 2], |b, _, _, k| cond[b][k]);
                concat_channels(ns, &extra)
            };
            model.denoiser.unet_mut().zero_grad();
            model.aperture.unet_mut().zero_grad();
            let loss = joint_step(model, &di, &ex, &tg, planes, &cond)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("joint loss became {loss} in epoch {epoch}")));
            }
            let mut params = model.denoiser.unet_mut().parameters_mut();
            params.extend(model.aperture.unet_mut().parameters_mut());
            adam_step(&mut params, &cfg)?;
            curve.steps.push(loss);
            total += loss;
        }
        curve.epochs.push(total / steps as f64);
    }
    Ok(curve)
}

/// Mean PSNR/SSIM of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics after the exposure stage, the noise stage and the full model,
/// in that order. The full model is scored before re-noising.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub exposure: StageMetrics,
    pub noise: StageMetrics,
    pub full: StageMetrics,
}

impl EvalReport {
    pub fn rows(&self) -> [(&'static str, StageMetrics); 3] {
        [("EXP", self.exposure), ("NS", self.noise), ("Full", self.full)]
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6}{:>10}{:>10}\n", "stage", "PSNR", "SSIM");
        for (name, m) in self.rows() {
            s.push_str(&format!("{name:<6}{:>10.3}{:>10.4}\n", m.psnr, m.ssim));
        }
        s
    }
}

/// Scores the model on every pair of `sequences` that `selection` accepts.
pub fn evaluate(model: &mut SimulatorModel, sequences: &[SceneSequence], selection: Stage) -> Result<EvalReport> {
    let frames = Frames::new(sequences)?;
    let refs = select_pairs(sequences, selection);
    if refs.is_empty() {
        return Err(Error::degenerate("no evaluation pairs"));
    }
    let options = SimulateOptions {
        renoise: false,
        ..SimulateOptions::default()
    };
    let mut sums = [[0.0; 2]; 3];
    for p in &refs {
        let (a, b) = frames.pair(p);
        let out = simulate_stages(model, a, &b.settings, &options)?;
        for (k, img) in [&out.exposure, &out.denoised, &out.aperture].into_iter().enumerate() {
            sums[k][0] += compute_psnr(img, b)?;
            sums[k][1] += compute_ssim(img, b)?;
        }
    }
    let n = refs.len() as f64;
    let m = |k: usize| StageMetrics {
        psnr: sums[k][0] / n,
        ssim: sums[k][1] / n,
    };
    Ok(EvalReport {
        pairs: refs.len(),
        exposure: m(0),
        noise: m(1),
        full: m(2),
    })
}

fn unet_entries(prefix: &str, c: &UNetConfig) -> Vec<(String, String)> {
    vec![
        (format!("{prefix}.base_width"), c.base_width.to_string()),
        (format!("{prefix}.levels"), c.levels.to_string()),
    ]
}

fn bundle_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Text {
        path: path.to_path_buf(),
        line: 0,
        message: message.into(),
    }
}

/// Writes `manifest.txt`, `exposure.txt`, `denoiser.ckpt` and
/// `aperture.ckpt` into `dir`.
pub fn save_model(model: &SimulatorModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = vec![
        ("schema_version".to_string(), MODEL_SCHEMA_VERSION.to_string()),
        (
            "nlf_propagation".to_string(),
            match model.config.nlf_propagation {
                NlfPropagation::ScaledSignal => "scaled_signal",
                NlfPropagation::Literal => "literal",
            }
            .to_string(),
        ),
        ("seed".to_string(), model.config.seed.to_string()),
    ];
    manifest.extend(unet_entries("denoiser", &model.config.denoiser));
    manifest.extend(unet_entries("aperture", &model.config.aperture));
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("manifest.txt", format_key_values(&manifest))?;
    write(
        "exposure.txt",
        format_key_values(&[
            ("w".to_string(), model.correction.w.to_string()),
            ("b".to_string(), model.correction.b.to_string()),
        ]),
    )?;
    for (name, params) in [
        ("denoiser.ckpt", model.denoiser.unet().parameters()),
        ("aperture.ckpt", model.aperture.unet().parameters()),
    ] {
        let p = dir.join(name);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params).map_err(|e| Error::io(&p, e))?;
        fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<SimulatorModel> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_key_values(&text, &mpath)?;
    let get = |key: &str| {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bundle_err(&mpath, format!("missing key `{key}`")))
    };
    let int = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| bundle_err(&mpath, format!("`{key}` is not an integer")))
    };
    if int("schema_version")? != u64::from(MODEL_SCHEMA_VERSION) {
        return Err(bundle_err(&mpath, "unsupported model schema version"));
    }
    let nlf_propagation = match get("nlf_propagation")?.as_str() {
        "scaled_signal" => NlfPropagation::ScaledSignal,
        "literal" => NlfPropagation::Literal,
        other => return Err(bundle_err(&mpath, format!("unknown NLF propagation `{other}`"))),
    };
    let config = ModelConfig {
        denoiser: UNetConfig {
            base_width: int("denoiser.base_width")? as usize,
            levels: int("denoiser.levels")? as usize,
            ..DenoiserNet::default_config()
        },
        aperture: UNetConfig {
            base_width: int("aperture.base_width")? as usize,
            levels: int("aperture.levels")? as usize,
            ..ApertureNet::default_config()
        },
        nlf_propagation,
        seed: int("seed")?,
    };
    let mut model = SimulatorModel::new(config)?;

    let epath = dir.join("exposure.txt");
    let etext = fs::read_to_string(&epath).map_err(|e| Error::io(&epath, e))?;
    let ev = parse_key_values(&etext, &epath)?;
    let num = |key: &str| -> Result<f64> {
        ev.iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| bundle_err(&epath, format!("missing or invalid `{key}`")))
    };
    model.correction = ExposureCorrection::new(num("w")?, num("b")?)?;

    let read = |name: &str| -> Result<Vec<(String, Tensor)>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        read_checkpoint(bytes.as_slice())
    };
    load_into(&read("denoiser.ckpt")?, &mut model.denoiser.unet_mut().parameters_mut())?;
    load_into(&read("aperture.ckpt")?, &mut model.aperture.unet_mut().parameters_mut())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        generate_synthetic_scene, render_with_settings, synthetic_sequence, synthetic_settings, RawContainer,
        SceneConfig, SequenceFrame,
    };
    use crate::raw::NoiseLevelFunction;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            denoiser: UNetConfig {
                base_width: 4,
                levels: 2,
                ..DenoiserNet::default_config()
            },
            aperture: UNetConfig {
                base_width: 4,
                levels: 2,
                ..ApertureNet::default_config()
            },
            ..ModelConfig::default()
        }
    }

    fn frame(iso: f64, f: f64) -> SequenceFrame {
        let img = RawImage::filled(2, 2, 0.2);
        SequenceFrame {
            raw: RawContainer::from_raw(&img).unwrap(),
            settings: synthetic_settings(0.01, iso, f),
            extra: vec![],
        }
    }

    fn seq(id: &str, frames: Vec<SequenceFrame>) -> SceneSequence {
        SceneSequence {
            scene_id: id.into(),
            camera_id: "c".into(),
            illuminance_lux: None,
            frames,
        }
    }

    #[test]
    fn noise_pairs_target_low_iso_only() {
        let s = seq("a", vec![frame(100.0, 8.0), frame(3200.0, 8.0)]);
        let pairs = select_pairs(&[s], Stage::Noise);
        assert_eq!(
            pairs,
            vec![PairRef {
                scene_id: "a".into(),
                input: 1,
                target: 0
            }]
        );
    }

    #[test]
    fn aperture_pairs_widen_only() {
        let s = seq("a", vec![frame(100.0, 4.0), frame(100.0, 8.0)]);
        let pairs = select_pairs(&[s], Stage::Aperture);
        assert_eq!(
            pairs,
            vec![PairRef {
                scene_id: "a".into(),
                input: 1,
                target: 0
            }]
        );
    }

    #[test]
    fn single_frame_sequences_have_no_pairs() {
        let s = seq("a", vec![frame(100.0, 4.0)]);
        for st in [Stage::Exposure, Stage::Noise, Stage::Aperture, Stage::Joint] {
            assert!(select_pairs(std::slice::from_ref(&s), st).is_empty());
        }
    }

    fn random_raw(seed: u64) -> RawImage {
        let scene = generate_synthetic_scene(
            seed,
            &SceneConfig {
                height: 20,
                width: 28,
                ..Default::default()
            },
        )
        .unwrap();
        let s = synthetic_settings(0.01, 400.0, 5.6);
        render_with_settings(&scene, &s, &synthetic_settings(0.01, 100.0, 8.0), seed).unwrap()
    }

    #[test]
    fn identity_configuration_reproduces_input() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let options = SimulateOptions {
            renoise: false,
            ..Default::default()
        };
        for seed in 0..5 {
            let raw = random_raw(seed);
            let out = simulate(&mut model, &raw, &raw.settings, &options).unwrap();
            assert_eq!(out.data(), raw.clone().clip().data());
        }
    }

    #[test]
    fn exposure_only_doubles_unclipped_means() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let raw = random_raw(3);
        let mut target = raw.settings;
        target.exposure_time *= 2.0;
        let options = SimulateOptions {
            renoise: false,
            stages: StageToggles {
                exposure: true,
                noise: false,
                aperture: false,
            },
            seed: 0,
        };
        let out = simulate(&mut model, &raw, &target, &options).unwrap();
        for (a, b) in raw.data().iter().zip(out.data()) {
            if *a < 0.45 {
                assert!((b - 2.0 * a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn renoising_matches_target_nlf_on_flat_patch() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let raw = RawImage::filled(400, 400, 0.25).with_settings(synthetic_settings(0.01, 800.0, 8.0));
        let target = synthetic_settings(0.02, 200.0, 8.0);
        let out = simulate(&mut model, &raw, &target, &SimulateOptions::default()).unwrap();
        let n = out.data().len() as f64;
        let mean = out.mean();
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = target.nlf.variance(0.125);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn stages_are_isolated() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in model.denoiser.unet_mut().head_mut().weight.value.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        for v in model.aperture.unet_mut().head_mut().weight.value.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        let raw = random_raw(2);
        let target = synthetic_settings(0.02, 200.0, 4.0);
        let all = simulate_stages(&mut model, &raw, &target, &SimulateOptions::default()).unwrap();
        let mut off = SimulateOptions::default();
        off.stages.aperture = false;
        let partial = simulate_stages(&mut model, &raw, &target, &off).unwrap();
        assert_eq!(all.exposure, partial.exposure);
        assert_eq!(all.denoised, partial.denoised);
        assert_eq!(partial.aperture, partial.denoised);
        off.stages.noise = false;
        let fewer = simulate_stages(&mut model, &raw, &target, &off).unwrap();
        assert_eq!(fewer.exposure, all.exposure);
    }

    #[test]
    fn simulate_is_deterministic() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let raw = random_raw(4);
        let target = synthetic_settings(0.005, 1600.0, 4.0);
        let o = SimulateOptions {
            seed: 9,
            ..Default::default()
        };
        let a = simulate(&mut model, &raw, &target, &o).unwrap();
        let b = simulate(&mut model, &raw, &target, &o).unwrap();
        assert_eq!(a, b);
    }

    fn tiny_dataset() -> Vec<SceneSequence> {
        let reference = synthetic_settings(0.01, 100.0, 8.0);
        let settings = [
            synthetic_settings(0.01, 100.0, 8.0),
            synthetic_settings(0.0025, 400.0, 8.0),
            synthetic_settings(0.0025, 100.0, 4.0),
            synthetic_settings(0.000625, 1600.0, 4.0),
        ];
        (0..2)
            .map(|k| {
                let scene = generate_synthetic_scene(
                    k,
                    &SceneConfig {
                        height: 32,
                        width: 32,
                        ..Default::default()
                    },
                )
                .unwrap();
                synthetic_sequence(&scene, &settings, &reference, 10 * k, &format!("s{k}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epoch_schedule_leaves_model_unchanged() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let before = (model.denoiser.unet().flat_values(), model.aperture.unet().flat_values());
        let schedule = TrainSchedule {
            exposure_epochs: 0,
            noise_epochs: 0,
            aperture_epochs: 0,
            joint_epochs: 0,
            ..TrainSchedule::desk()
        };
        train(&mut model, &tiny_dataset(), &schedule).unwrap();
        assert_eq!(model.correction, ExposureCorrection::default());
        assert_eq!(before, (model.denoiser.unet().flat_values(), model.aperture.unet().flat_values()));
    }

    #[test]
    fn desk_training_reduces_every_stage_loss() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let schedule = TrainSchedule {
            patch_size: 16,
            steps_per_epoch: Some(6),
            noise_epochs: 8,
            aperture_epochs: 8,
            joint_epochs: 3,
            ..TrainSchedule::desk()
        };
        let report = train(&mut model, &tiny_dataset(), &schedule).unwrap();
        assert!(report.exposure_objective.windows(2).all(|w| w[1] <= w[0]));
        for curve in [&report.noise, &report.aperture] {
            let first = curve.epochs[0];
            let last = *curve.epochs.last().unwrap();
            assert!(last < first, "{:?}", curve.epochs);
        }
        assert_eq!(report.joint.epochs.len(), 3);
        assert!(report.joint.steps.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn empty_stage_data_names_the_stage() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let s = seq("a", vec![frame(800.0, 8.0), frame(1600.0, 8.0)]);
        let err = train(&mut model, &[s], &TrainSchedule {
                exposure_epochs: 0,
                ..TrainSchedule::desk()
            }).unwrap_err();
        assert!(err.to_string().contains("noise"), "{err}");
    }

    #[test]
    fn schedule_lr_at_epoch_twenty() {
        assert_eq!(TrainSchedule::full().stage(30, 0).lr_at(20), 1e-4);
    }

    #[test]
    fn identity_task_evaluates_to_cap() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        let img = RawImage::filled(8, 8, 0.3);
        let mk = |t: f64| SequenceFrame {
            raw: RawContainer::from_raw(&img).unwrap(),
            settings: ExposureSettings {
                exposure_time: t,
                iso: 100.0,
                f_number: 8.0,
                nlf: NoiseLevelFunction::noiseless(),
            },
            extra: vec![],
        };
        // Two frames with identical settings: every pair is an identity task.
        let s = seq("a", vec![mk(0.01), mk(0.01)]);
        let r = evaluate(&mut model, &[s], Stage::Exposure).unwrap();
        assert_eq!(r.pairs, 2);
        for (_, m) in r.rows() {
            assert_eq!(m.psnr, crate::raw::PSNR_CAP_DB);
            assert!((m.ssim - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.rows().map(|(n, _)| n), ["EXP", "NS", "Full"]);
    }

    #[test]
    fn bundle_round_trip() {
        let mut model = SimulatorModel::new(small_config()).unwrap();
        model.correction = ExposureCorrection::new(0.97, 0.0015).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in model.aperture.unet_mut().head_mut().weight.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.correction, model.correction);
        assert_eq!(back.config, model.config);
        assert_eq!(back.aperture.unet().flat_values(), model.aperture.unet().flat_values());
        assert_eq!(back.denoiser.unet().flat_values(), model.denoiser.unet().flat_values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn selection_ignores_sequence_order(perm_seed in 0u64..1000) {
            let isos = [100.0, 200.0, 400.0, 800.0, 3200.0];
            let fs = [4.0, 5.6, 8.0, 22.0];
            let mut seqs: Vec<SceneSequence> = (0..4)
                .map(|k| seq(&format!("s{k}"), (0..3).map(|i| frame(isos[(k + i) % 5], fs[(k * 2 + i) % 4])).collect()))
                .collect();
            let before: Vec<_> = [Stage::Exposure, Stage::Noise, Stage::Aperture].iter().map(|&s| select_pairs(&seqs, s)).collect();
            seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let after: Vec<_> = [Stage::Exposure, Stage::Noise, Stage::Aperture].iter().map(|&s| select_pairs(&seqs, s)).collect();
            prop_assert_eq!(before, after);
        }
    }
}
