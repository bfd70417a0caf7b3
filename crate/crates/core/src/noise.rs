//! Noise stage: noise-level functions under scaling, per-pixel noise maps,
//! heteroscedastic noise synthesis and the residual denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::ops::concat_channels;
use crate::nn::tensor::Tensor;
use crate::nn::unet::{crop_to, pad_to_multiple, NoGate, UNet, UNetConfig};
use crate::raw::{clip_unit, NoiseLevelFunction, RawImage, PLANES};
use crate::training::{train_residual_net, LossCurve, StageSchedule, TrainSample};

/// Output ISOs the denoiser is trained towards.
pub const DENOISER_TARGET_ISOS: [f64; 3] = [100.0, 200.0, 400.0];

/// How the shot coefficient transforms when an image is scaled by α̂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NlfPropagation {
    /// NLF of the scaled image as a function of the scaled signal:
    /// `(α̂²·read, α̂·shot)`. Statistically exact.
    #[default]
    ScaledSignal,
    /// Shot term taken literally as `α̂·shot·x₁` in original units, which
    /// against the scaled signal is `(α̂²·read, shot)`.
    Literal,
}

/// NLF of `α̂·y` given the NLF of `y`.
pub fn propagate_nlf(nlf: NoiseLevelFunction, alpha: f64, mode: NlfPropagation) -> Result<NoiseLevelFunction> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("scale {alpha} must be positive")));
    }
    let read = alpha * alpha * nlf.read;
    let shot = match mode {
        NlfPropagation::ScaledSignal => alpha * nlf.shot,
        NlfPropagation::Literal => nlf.shot,
    };
    NoiseLevelFunction::new(read, shot)
}

/// Per-pixel noise standard deviation, same layout as [`RawImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelMap {
    height: usize,
    width: usize,
    sigma: Vec<f64>,
}

impl NoiseLevelMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.height, self.width, PLANES], self.sigma.clone()).expect("sized")
    }
}

/// `sigma[p] = sqrt(max(read + shot·image[p], 0))`.
pub fn noise_level_map(image: &RawImage, nlf: &NoiseLevelFunction) -> Result<NoiseLevelMap> {
    nlf.validate()?;
    Ok(NoiseLevelMap {
        height: image.height(),
        width: image.width(),
        sigma: image.data().iter().map(|&x| nlf.variance(x).sqrt()).collect(),
    })
}

/// Adds zero-mean Gaussian noise with variance `nlf(clean[p])` to every
/// pixel and clips to `[0, 1]`. Pixels are drawn in storage order from a
/// ChaCha8 stream seeded with `seed`.
pub fn synthesize_noise(clean: &RawImage, nlf: &NoiseLevelFunction, seed: u64) -> Result<RawImage> {
    nlf.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = clean
        .data()
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            clip_unit(x + nlf.variance(x).sqrt() * z)
        })
        .collect();
    clean.with_data(data)
}

/// Packs a raw image as a batch-1 tensor.
pub fn image_tensor(image: &RawImage) -> Tensor {
    Tensor::from_vec([1, image.height(), image.width(), PLANES], image.data().to_vec()).expect("sized")
}

/// Residual denoiser: 8 input channels (image and noise map), 4 output
/// channels.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    net: UNet<NoGate>,
}

impl DenoiserNet {
    pub fn default_config() -> UNetConfig {
        UNetConfig {
            in_channels: 2 * PLANES,
            out_channels: PLANES,
            base_width: 16,
            levels: 3,
        }
    }

    pub fn new(seed: u64) -> Self {
        Self::with_config(Self::default_config(), seed).expect("default config is valid")
    }

    pub fn with_config(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.in_channels != 2 * PLANES || config.out_channels != PLANES {
            return Err(Error::param("denoiser must map 8 channels to 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: UNet::new("denoiser", config, &mut rng, |_, _, _, _| NoGate::default())?,
        })
    }

    pub fn unet(&self) -> &UNet<NoGate> {
        &self.net
    }

    pub fn unet_mut(&mut self) -> &mut UNet<NoGate> {
        &mut self.net
    }
}

/// Network input `image ⊕ map`.
pub fn denoiser_input(image: &RawImage, nlm: &NoiseLevelMap) -> Result<Tensor> {
    if (image.height(), image.width()) != (nlm.height, nlm.width) {
        return Err(Error::dim(format!(
            "noise map is {}x{}, image is {}x{}",
            nlm.height,
            nlm.width,
            image.height(),
            image.width()
        )));
    }
    concat_channels(&image_tensor(image), &nlm.to_tensor())
}

/// Runs a residual network on a full frame of arbitrary size.
pub(crate) fn full_frame_residual<G: crate::nn::SkipGate>(
    net: &mut UNet<G>,
    input: &Tensor,
    cond: [f64; 2],
) -> Result<Tensor> {
    let (h, w) = (input.height(), input.width());
    let padded = pad_to_multiple(input, net.config().size_multiple());
    let out = net.forward(&padded, &[cond])?;
    Ok(crop_to(&out, h, w))
}

/// `clip(image + residual)` with the residual laid out like the image.
pub(crate) fn add_residual(image: &RawImage, residual: &Tensor) -> Result<RawImage> {
    let data = image
        .data()
        .iter()
        .zip(residual.data())
        .map(|(&x, &r)| clip_unit(x + r))
        .collect();
    image.with_data(data)
}

/// `clip(image + net(image ⊕ nlm))`.
pub fn denoise(image: &RawImage, nlm: &NoiseLevelMap, net: &mut DenoiserNet) -> Result<RawImage> {
    let input = denoiser_input(image, nlm)?;
    let residual = full_frame_residual(&mut net.net, &input, [0.0, 0.0])?;
    add_residual(image, &residual)
}

/// One denoiser training example: exposure-stage output, its noise map and
/// the captured target.
#[derive(Debug, Clone)]
pub struct DenoisePair {
    pub input: RawImage,
    pub noise_map: NoiseLevelMap,
    pub target: RawImage,
}

pub fn is_denoiser_target_iso(iso: f64) -> bool {
    DENOISER_TARGET_ISOS.contains(&iso)
}

pub fn denoise_sample(pair: &DenoisePair) -> Result<TrainSample> {
    pair.input.ensure_same_shape(&pair.target)?;
    let input = denoiser_input(&pair.input, &pair.noise_map)?;
    let residual: Vec<f64> = pair
        .target
        .data()
        .iter()
        .zip(pair.input.data())
        .map(|(t, i)| t - i)
        .collect();
    Ok(TrainSample {
        input,
        target: Tensor::from_vec([1, pair.input.height(), pair.input.width(), PLANES], residual)?,
        cond: [0.0, 0.0],
    })
}

/// Checks the target-ISO rule on every pair.
pub fn validate_denoise_pairs(pairs: &[DenoisePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::degenerate("denoiser stage has no training pairs"));
    }
    for (i, p) in pairs.iter().enumerate() {
        let iso = p.target.settings.iso;
        if !is_denoiser_target_iso(iso) {
            return Err(Error::param(format!(
                "denoiser pair {i} targets ISO {iso}; targets must be ISO 100, 200 or 400"
            )));
        }
    }
    Ok(())
}

/// Fits the denoiser to predict `target − input` under L1.
pub fn train_denoiser(pairs: &[DenoisePair], net: &mut DenoiserNet, schedule: &StageSchedule) -> Result<LossCurve> {
    validate_denoise_pairs(pairs)?;
    let samples = pairs.iter().map(denoise_sample).collect::<Result<Vec<_>>>()?;
    train_residual_net(&mut net.net, &samples, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradient_check;
    use crate::nn::layers::Module;
    use crate::nn::ops::l1_loss;
    use crate::raw::ExposureSettings;
    use proptest::prelude::*;
    use rand::Rng;

    fn nlf(read: f64, shot: f64) -> NoiseLevelFunction {
        NoiseLevelFunction::new(read, shot).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawImage::from_planes(h, w, (0..h * w * PLANES).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn propagate_examples() {
        let f = nlf(1e-6, 1e-4);
        assert_eq!(propagate_nlf(f, 1.0, NlfPropagation::ScaledSignal).unwrap(), f);
        let g = propagate_nlf(f, 2.0, NlfPropagation::ScaledSignal).unwrap();
        assert!((g.read - 4e-6).abs() < 1e-18 && (g.shot - 2e-4).abs() < 1e-18);
        assert!((g.variance(0.5) - 1.04e-4).abs() < 1e-15);
        let h = propagate_nlf(f, 0.5, NlfPropagation::ScaledSignal).unwrap();
        assert_eq!((h.read, h.shot), (0.25e-6, 0.5e-4));
        let l = propagate_nlf(f, 2.0, NlfPropagation::Literal).unwrap();
        assert_eq!((l.read, l.shot), (4e-6, 1e-4));
        assert!(propagate_nlf(f, 0.0, NlfPropagation::ScaledSignal).is_err());
    }

    #[test]
    fn propagation_matches_monte_carlo_scaling() {
        let f = nlf(1e-6, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sd = f.variance(0.25).sqrt();
        let n = 2_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = 2.0 * (0.25 + sd * z);
            s += y;
            s2 += y * y;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let predicted = propagate_nlf(f, 2.0, NlfPropagation::ScaledSignal).unwrap().variance(0.5);
        assert!((var / predicted - 1.0).abs() < 0.01, "{var} vs {predicted}");
    }

    #[test]
    fn noise_map_examples() {
        let img = RawImage::filled(3, 2, 0.5);
        assert!(noise_level_map(&img, &nlf(0.0, 0.0)).unwrap().sigma().iter().all(|&s| s == 0.0));
        let m = noise_level_map(&img, &nlf(1e-6, 1e-4)).unwrap();
        assert!(m.sigma().iter().all(|&s| s == (1e-6f64 + 1e-4 * 0.5).sqrt()));
        let r = random_image(4, 5, 1);
        let m = noise_level_map(&r, &nlf(2e-5, 3e-3)).unwrap();
        for (s, x) in m.sigma().iter().zip(r.data()) {
            assert_eq!(*s, (2e-5 + 3e-3 * x).sqrt());
        }
    }

    #[test]
    fn zero_nlf_synthesis_is_identity() {
        let r = random_image(5, 5, 2);
        assert_eq!(synthesize_noise(&r, &nlf(0.0, 0.0), 9).unwrap(), r);
    }

    #[test]
    fn synthesis_statistics_at_mid_gray() {
        let img = RawImage::filled(500, 500, 0.5);
        let out = synthesize_noise(&img, &nlf(1e-6, 1e-4), 11).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 5.1e-5 - 1.0).abs() < 0.01, "{var}");
        assert!((mean - 0.5).abs() < 3.0 * (5.1e-5f64 / n).sqrt());
    }

    #[test]
    fn clipping_at_black_biases_mean_up() {
        let img = RawImage::filled(100, 100, 0.0);
        let out = synthesize_noise(&img, &nlf(1e-4, 0.0), 4).unwrap();
        assert!(out.mean() > 0.0);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let r = random_image(6, 6, 5);
        let f = nlf(1e-4, 1e-2);
        assert_eq!(synthesize_noise(&r, &f, 7).unwrap(), synthesize_noise(&r, &f, 7).unwrap());
        assert_ne!(synthesize_noise(&r, &f, 7).unwrap(), synthesize_noise(&r, &f, 8).unwrap());
    }

    #[test]
    fn untrained_denoiser_is_identity() {
        let mut net = DenoiserNet::new(0);
        let r = random_image(7, 9, 3);
        let m = noise_level_map(&r, &nlf(1e-4, 1e-3)).unwrap();
        assert_eq!(denoise(&r, &m, &mut net).unwrap(), r);
        let z = RawImage::filled(4, 4, 0.0);
        let zm = noise_level_map(&z, &nlf(0.0, 0.0)).unwrap();
        assert_eq!(denoise(&z, &zm, &mut net).unwrap(), z);
    }

    #[test]
    fn denoise_rejects_mismatched_map() {
        let mut net = DenoiserNet::new(0);
        let r = random_image(4, 4, 3);
        let m = noise_level_map(&random_image(4, 5, 1), &nlf(0.0, 0.0)).unwrap();
        assert!(denoise(&r, &m, &mut net).is_err());
    }

    fn pair(clean: &RawImage, f: NoiseLevelFunction, iso: f64, seed: u64) -> DenoisePair {
        let noisy = synthesize_noise(clean, &f, seed).unwrap();
        let map = noise_level_map(&noisy, &f).unwrap();
        let target = clean
            .clone()
            .with_settings(ExposureSettings {
                iso,
                ..ExposureSettings::default()
            });
        DenoisePair {
            input: noisy,
            noise_map: map,
            target,
        }
    }

    #[test]
    fn training_rejects_high_iso_targets_and_empty_sets() {
        let mut net = DenoiserNet::new(0);
        let c = random_image(8, 8, 1);
        let p = pair(&c, nlf(1e-4, 1e-3), 800.0, 1);
        let err = train_denoiser(&[p], &mut net, &StageSchedule::default()).unwrap_err();
        assert!(err.to_string().contains("800"));
        assert!(matches!(
            train_denoiser(&[], &mut net, &StageSchedule::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn zero_residual_pairs_keep_weights_still() {
        let mut net = DenoiserNet::new(0);
        let c = random_image(8, 8, 1);
        let mut p = pair(&c, nlf(0.0, 0.0), 100.0, 1);
        p.target = p.input.clone().with_settings(p.target.settings);
        let before = net.unet().flat_values();
        let schedule = StageSchedule {
            epochs: 2,
            patch_size: 8,
            ..Default::default()
        };
        let curve = train_denoiser(&[p], &mut net, &schedule).unwrap();
        assert!(curve.steps.iter().all(|&l| l == 0.0));
        assert_eq!(net.unet().flat_values(), before);
    }

    #[test]
    fn training_beats_identity_on_held_out_noise() {
        let f = nlf(4e-4, 4e-3);
        let scene = |seed: u64| {
            // Smooth ramps so the clean signal is learnable from context.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c): (f64, f64, f64) = (rng.random_range(0.2..0.6), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let mut data = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    for k in 0..PLANES {
                        data.push(a + b * y as f64 + c * x as f64 + 0.02 * k as f64);
                    }
                }
            }
            RawImage::from_planes(16, 16, data).unwrap()
        };
        let pairs: Vec<_> = (0..6).map(|i| pair(&scene(i), f, 100.0, 100 + i)).collect();
        let mut net = DenoiserNet::with_config(
            UNetConfig {
                base_width: 8,
                ..DenoiserNet::default_config()
            },
            1,
        )
        .unwrap();
        let schedule = StageSchedule {
            epochs: 40,
            patch_size: 16,
            lr: 2e-3,
            ..Default::default()
        };
        train_denoiser(&pairs, &mut net, &schedule).unwrap();
        let test = pair(&scene(50), f, 100.0, 999);
        let out = denoise(&test.input, &test.noise_map, &mut net).unwrap();
        let before = crate::raw::mean_abs_error(&test.input, &test.target).unwrap();
        let after = crate::raw::mean_abs_error(&out, &test.target).unwrap();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn full_denoiser_loss_passes_gradient_check() {
        let cfg = UNetConfig {
            base_width: 4,
            ..DenoiserNet::default_config()
        };
        let mut net = DenoiserNet::with_config(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in net.unet_mut().parameters_mut() {
            if p.name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(0.1..0.5);
                }
            }
        }
        let head = net.unet_mut().head_mut();
        for v in head.weight.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let clean = random_image(8, 8, 4);
        let p = pair(&clean, nlf(1e-3, 1e-2), 100.0, 5);
        let sample = denoise_sample(&p).unwrap();
        let smoothing = Some(0.1);
        net.unet_mut().zero_grad();
        let out = net.unet_mut().forward(&sample.input, &[[0.0, 0.0]]).unwrap();
        let (_, g) = l1_loss(&out, &sample.target, smoothing).unwrap();
        net.unet_mut().backward(&g).unwrap();
        let analytic = net.unet().flat_grads();
        let theta = net.unet().flat_values();
        let mut probe = net.clone();
        let report = gradient_check(
            |t| {
                probe.unet_mut().set_flat_values(t).unwrap();
                let o = probe.unet_mut().forward(&sample.input, &[[0.0, 0.0]]).unwrap();
                l1_loss(&o, &sample.target, smoothing).unwrap().0
            },
            &analytic,
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn propagation_composes(read in 0.0..1e-3f64, shot in 0.0..1e-2f64, a in 0.1..10.0f64, b in 0.1..10.0f64) {
            for mode in [NlfPropagation::ScaledSignal, NlfPropagation::Literal] {
                let f = nlf(read, shot);
                let two = propagate_nlf(propagate_nlf(f, a, mode).unwrap(), b, mode).unwrap();
                let one = propagate_nlf(f, a * b, mode).unwrap();
                prop_assert!((two.read - one.read).abs() <= 1e-12 * one.read.max(1e-300));
                prop_assert!((two.shot - one.shot).abs() <= 1e-12 * one.shot.max(1e-300));
            }
        }

        #[test]
        fn denoise_stays_in_unit_range(seed in 0u64..1000) {
            let mut net = DenoiserNet::with_config(UNetConfig { base_width: 4, levels: 2, ..DenoiserNet::default_config() }, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in net.unet_mut().head_mut().weight.value.data_mut() {
                *v = rng.random_range(-5.0..5.0);
            }
            let r = random_image(6, 6, seed);
            let m = noise_level_map(&r, &nlf(1e-3, 1e-2)).unwrap();
            let out = denoise(&r, &m, &mut net).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
