//! Preview rendering, HDR bracketing with exposure fusion, and simulated
//! auto-exposure.
//!
//! Fusion is a standard multi-scale exposure-fusion scheme: per-pixel
//! weights from well-exposedness and local contrast, blended over Laplacian
//! pyramids.

use rayon::prelude::*;

use crate::dataset::{EXPOSURE_TIME_RANGE, F_NUMBER_RANGE, ISO_RANGE};
use crate::error::{Error, Result};
use crate::exposure::compute_alpha;
use crate::pipeline::{simulate, SimulateOptions, SimulatorModel};
use crate::raw::{ExposureSettings, NoiseLevelFunction, RawImage, PLANES};

/// Tone curve applied after the colour matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToneCurve {
    /// `v^(1/γ)`.
    Gamma(f64),
    Srgb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    /// White-balance gains for R, G and B.
    pub gains: [f64; 3],
    /// Camera-to-output colour matrix, applied to white-balanced RGB.
    pub matrix: [[f64; 3]; 3],
    pub tone: ToneCurve,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            gains: [2.0, 1.0, 1.6],
            matrix: IDENTITY,
            tone: ToneCurve::Srgb,
        }
    }
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl RenderParams {
    /// Unit gains, identity matrix, linear output.
    pub fn linear() -> Self {
        Self {
            gains: [1.0; 3],
            matrix: IDENTITY,
            tone: ToneCurve::Gamma(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gains.iter().all(|g| g.is_finite() && *g > 0.0) {
            return Err(Error::param(format!("white-balance gains {:?} must be positive", self.gains)));
        }
        if !self.matrix.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::param("colour matrix must be finite"));
        }
        if let ToneCurve::Gamma(g) = self.tone {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::param(format!("gamma {g} must be positive")));
            }
        }
        Ok(())
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{} bytes do not form a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn srgb_encode(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Half-resolution preview: G is the mean of the two green planes, then
/// white balance, colour matrix, clipping, tone curve and rounding to the
/// nearest level (halves round up, so 0.5 maps to 128).
pub fn render_srgb(raw: &RawImage, params: &RenderParams) -> Result<RgbImage> {
    params.validate()?;
    let mut data = Vec::with_capacity(raw.height() * raw.width() * 3);
    for px in raw.data().chunks_exact(PLANES) {
        let cam = [
            px[0] * params.gains[0],
            0.5 * (px[1] + px[2]) * params.gains[1],
            px[3] * params.gains[2],
        ];
        for row in &params.matrix {
            let v = (row[0] * cam[0] + row[1] * cam[1] + row[2] * cam[2]).clamp(0.0, 1.0);
            let v = match params.tone {
                ToneCurve::Gamma(g) => v.powf(1.0 / g),
                ToneCurve::Srgb => srgb_encode(v),
            };
            data.push(quantize(v));
        }
    }
    RgbImage::new(raw.height(), raw.width(), data)
}

/// Exposure offsets of an HDR bracket, in EV.
pub fn bracket_evs() -> Vec<f64> {
    (-8..=8).map(|k| f64::from(k) * 0.5).collect()
}

/// NLF of the same sensor at another ISO: read variance scales with the
/// square of the gain, shot variance linearly.
pub fn nlf_at_iso(nlf: &NoiseLevelFunction, from_iso: f64, to_iso: f64) -> NoiseLevelFunction {
    let g = to_iso / from_iso;
    NoiseLevelFunction {
        read: nlf.read * g * g,
        shot: nlf.shot * g,
    }
}

/// Searches the neighbourhood of `t` for an exposure time giving exactly
/// `alpha` from `source`.
fn exact_time(source: &ExposureSettings, mut target: ExposureSettings, alpha: f64) -> Result<Option<f64>> {
    let t0 = target.exposure_time;
    for step in 0..=64u32 {
        for dir in [1.0, -1.0] {
            let mut t = t0;
            for _ in 0..step {
                t = if dir > 0.0 { t.next_up() } else { t.next_down() };
            }
            target.exposure_time = t;
            if compute_alpha(source, &target)? == alpha {
                return Ok(Some(t));
            }
            if step == 0 {
                break;
            }
        }
    }
    Ok(None)
}

/// One target per half stop in `[-4, 4]` EV at the lowest ISO with the
/// aperture unchanged. Targets whose exposure time falls outside the
/// supported range are dropped with a warning.
pub fn plan_hdr_bracket(source: &ExposureSettings) -> Result<Vec<(f64, ExposureSettings)>> {
    source.validate()?;
    let iso = ISO_RANGE.0;
    let mut out = Vec::new();
    for ev in bracket_evs() {
        let alpha = 2f64.powf(ev);
        let t = source.exposure_time * alpha * source.iso / iso;
        if !(EXPOSURE_TIME_RANGE.0..=EXPOSURE_TIME_RANGE.1).contains(&t) {
            log::warn!("dropping {ev:+} EV target: exposure time {t} s is out of range");
            continue;
        }
        let target = ExposureSettings {
            exposure_time: t,
            iso,
            f_number: source.f_number,
            nlf: nlf_at_iso(&source.nlf, source.iso, iso),
        };
        match exact_time(source, target, alpha)? {
            Some(exposure_time) => out.push((ev, ExposureSettings { exposure_time, ..target })),
            None => log::warn!("dropping {ev:+} EV target: no exposure time reproduces the ratio exactly"),
        }
    }
    Ok(out)
}

/// Weights of the fusion quality measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Width of the Gaussian around mid-gray.
    pub sigma: f64,
    pub exposedness_exponent: f64,
    pub contrast_exponent: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            exposedness_exponent: 1.0,
            contrast_exponent: 1.0,
        }
    }
}

const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Planar {
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl Planar {
    fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + k]
    }

    fn from_rgb(img: &RgbImage) -> Self {
        Self {
            h: img.height,
            w: img.width,
            c: 3,
            v: img.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    fn sub(&self, o: &Planar) -> Planar {
        Planar {
            v: self.v.iter().zip(&o.v).map(|(a, b)| a - b).collect(),
            ..*self
        }
    }

    fn blur(&self) -> Planar {
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0; self.v.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for k in 0..self.c {
                    tmp[(y * self.w + x) * self.c + k] = K
                        .iter()
                        .enumerate()
                        .map(|(i, wgt)| wgt * self.at(y, clampi(x as isize + i as isize - 2, self.w), k))
                        .sum();
                }
            }
        }
        let t = Planar { v: tmp, ..*self };
        let mut out = vec![0.0; self.v.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for k in 0..self.c {
                    out[(y * self.w + x) * self.c + k] = K
                        .iter()
                        .enumerate()
                        .map(|(i, wgt)| wgt * t.at(clampi(y as isize + i as isize - 2, self.h), x, k))
                        .sum();
                }
            }
        }
        Planar { v: out, ..*self }
    }

    fn down(&self) -> Planar {
        let b = self.blur();
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w * self.c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..self.c {
                    v.push(b.at(2 * y, 2 * x, k));
                }
            }
        }
        Planar { h, w, c: self.c, v }
    }

    fn up(&self, h: usize, w: usize) -> Planar {
        let mut v = Vec::with_capacity(h * w * self.c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..self.c {
                    v.push(self.at((y / 2).min(self.h - 1), (x / 2).min(self.w - 1), k));
                }
            }
        }
        Planar { h, w, c: self.c, v }.blur()
    }
}

fn pyramid_levels(h: usize, w: usize) -> usize {
    let mut levels = 1;
    let (mut h, mut w) = (h, w);
    while h.min(w) >= 16 {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        levels += 1;
    }
    levels
}

fn gaussian_pyramid(p: Planar, levels: usize) -> Vec<Planar> {
    let mut out = vec![p];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").down();
        out.push(next);
    }
    out
}

fn laplacian_pyramid(p: Planar, levels: usize) -> Vec<Planar> {
    let g = gaussian_pyramid(p, levels);
    let mut out: Vec<Planar> = g
        .windows(2)
        .map(|pair| pair[0].sub(&pair[1].up(pair[0].h, pair[0].w)))
        .collect();
    out.push(g.last().expect("non-empty").clone());
    out
}

fn check_frames(frames: &[RgbImage]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::param("fusion needs at least two frames"));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    if h == 0 || w == 0 {
        return Err(Error::dim("fusion frames are empty"));
    }
    if let Some(f) = frames.iter().find(|f| (f.height, f.width) != (h, w)) {
        return Err(Error::dim(format!(
            "frame of {}x{} does not match {h}x{w}",
            f.height, f.width
        )));
    }
    Ok(())
}

/// Normalized per-pixel fusion weights, one `height × width` map per frame.
pub fn fusion_weights(frames: &[RgbImage], cfg: &FusionConfig) -> Result<Vec<Vec<f64>>> {
    check_frames(frames)?;
    let (h, w) = (frames[0].height, frames[0].width);
    let mut weights: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let p = Planar::from_rgb(f);
            let gray: Vec<f64> = p.v.chunks_exact(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
            let g = |y: usize, x: usize| gray[y * w + x];
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let lap = 4.0 * g(y, x)
                        - g(y.saturating_sub(1), x)
                        - g((y + 1).min(h - 1), x)
                        - g(y, x.saturating_sub(1))
                        - g(y, (x + 1).min(w - 1));
                    let exposed: f64 = (0..3)
                        .map(|k| {
                            let d = p.at(y, x, k) - 0.5;
                            (-d * d / (2.0 * cfg.sigma * cfg.sigma)).exp()
                        })
                        .product();
                    let contrast = lap.abs() + 1e-3;
                    out.push(
                        exposed.powf(cfg.exposedness_exponent) * contrast.powf(cfg.contrast_exponent) + WEIGHT_FLOOR,
                    );
                }
            }
            out
        })
        .collect();
    for i in 0..h * w {
        let total: f64 = weights.iter().map(|m| m[i]).sum();
        for m in &mut weights {
            m[i] /= total;
        }
    }
    Ok(weights)
}

/// Exposure fusion of equally sized frames.
pub fn fuse_exposures(frames: &[RgbImage], cfg: &FusionConfig) -> Result<RgbImage> {
    let weights = fusion_weights(frames, cfg)?;
    let (h, w) = (frames[0].height, frames[0].width);
    let levels = pyramid_levels(h, w);
    let mut blended: Option<Vec<Planar>> = None;
    for (frame, wmap) in frames.iter().zip(weights) {
        let lap = laplacian_pyramid(Planar::from_rgb(frame), levels);
        let wp = gaussian_pyramid(Planar { h, w, c: 1, v: wmap }, levels);
        let contrib: Vec<Planar> = lap
            .into_iter()
            .zip(&wp)
            .map(|(mut l, g)| {
                for (i, v) in l.v.iter_mut().enumerate() {
                    *v *= g.v[i / 3];
                }
                l
            })
            .collect();
        blended = Some(match blended {
            None => contrib,
            Some(acc) => acc
                .into_iter()
                .zip(contrib)
                .map(|(mut a, b)| {
                    a.v.iter_mut().zip(b.v).for_each(|(x, y)| *x += y);
                    a
                })
                .collect(),
        });
    }
    let mut pyr = blended.expect("at least two frames");
    let mut img = pyr.pop().expect("non-empty pyramid");
    while let Some(l) = pyr.pop() {
        let up = img.up(l.h, l.w);
        img = Planar {
            v: up.v.iter().zip(&l.v).map(|(a, b)| a + b).collect(),
            ..l
        };
    }
    RgbImage::new(h, w, img.v.into_iter().map(quantize).collect())
}

/// Fraction of channel values inside `[lo, hi]` (as fractions of 255).
pub fn well_exposed_fraction(img: &RgbImage, lo: f64, hi: f64) -> f64 {
    if img.data.is_empty() {
        return 0.0;
    }
    let n = img
        .data
        .iter()
        .filter(|&&b| (lo..=hi).contains(&(f64::from(b) / 255.0)))
        .count();
    n as f64 / img.data.len() as f64
}

/// Bracket simulation, rendering and fusion of one raw image.
#[derive(Debug, Clone)]
pub struct HdrResult {
    pub targets: Vec<(f64, ExposureSettings)>,
    pub frames: Vec<RgbImage>,
    pub fused: RgbImage,
}

pub fn hdr_from_raw(
    model: &mut SimulatorModel,
    raw: &RawImage,
    params: &RenderParams,
    fusion: &FusionConfig,
    options: &SimulateOptions,
) -> Result<HdrResult> {
    let targets = plan_hdr_bracket(&raw.settings)?;
    let mut frames = Vec::with_capacity(targets.len());
    for (i, (_, t)) in targets.iter().enumerate() {
        let o = SimulateOptions {
            seed: options.seed.wrapping_add(i as u64),
            ..*options
        };
        frames.push(render_srgb(&simulate(model, raw, t, &o)?, params)?);
    }
    let fused = fuse_exposures(&frames, fusion)?;
    Ok(HdrResult { targets, frames, fused })
}

/// A candidate setting and its score (lower is better).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureState {
    pub settings: ExposureSettings,
    pub score: f64,
}

/// Defect score of a simulated capture.
pub trait Scorer: Sync {
    fn score(&self, image: &RawImage) -> f64;
}

impl<F: Fn(&RawImage) -> f64 + Sync> Scorer for F {
    fn score(&self, image: &RawImage) -> f64 {
        self(image)
    }
}

/// Weighted sum of the clipped fraction, the near-black fraction and a
/// robust noise estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicScorer {
    pub clip_level: f64,
    pub black_level: f64,
    pub clip_weight: f64,
    pub black_weight: f64,
    pub noise_weight: f64,
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self {
            clip_level: 0.99,
            black_level: 0.02,
            clip_weight: 1.0,
            black_weight: 1.0,
            noise_weight: 1.0,
        }
    }
}

/// Median absolute horizontal difference within each plane, scaled to a
/// Gaussian standard deviation.
pub fn estimate_noise_sigma(image: &RawImage) -> f64 {
    let (h, w) = (image.height(), image.width());
    if w < 2 {
        return 0.0;
    }
    let mut diffs: Vec<f64> = (0..h)
        .flat_map(|r| (0..w - 1).flat_map(move |c| (0..PLANES).map(move |p| (r, c, p))))
        .map(|(r, c, p)| (image.get(r, c + 1, p) - image.get(r, c, p)).abs())
        .collect();
    if diffs.is_empty() {
        return 0.0;
    }
    let mid = diffs.len() / 2;
    let (_, median, _) = diffs.select_nth_unstable_by(mid, f64::total_cmp);
    *median / (0.674_489_75 * std::f64::consts::SQRT_2)
}

impl Scorer for HeuristicScorer {
    fn score(&self, image: &RawImage) -> f64 {
        let n = image.data().len().max(1) as f64;
        let clipped = image.data().iter().filter(|&&v| v >= self.clip_level).count() as f64 / n;
        let black = image.data().iter().filter(|&&v| v <= self.black_level).count() as f64 / n;
        self.clip_weight * clipped + self.black_weight * black + self.noise_weight * estimate_noise_sigma(image)
    }
}

/// Outcome of [`auto_expose`].
#[derive(Debug, Clone, PartialEq)]
pub struct AutoExposeResult {
    /// Position of the winner in the candidate list.
    pub best_index: usize,
    pub best: ExposureState,
    /// Every candidate with its score, in candidate order.
    pub table: Vec<ExposureState>,
}

fn settings_seed(base: u64, s: &ExposureSettings) -> u64 {
    let mut h = base ^ 0x243F_6A88_85A3_08D3;
    for bits in [
        s.exposure_time.to_bits(),
        s.iso.to_bits(),
        s.f_number.to_bits(),
        s.nlf.read.to_bits(),
        s.nlf.shot.to_bits(),
    ] {
        h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01B3).rotate_left(17);
    }
    h
}

/// Simulates every candidate, scores it and returns the lowest score. Ties
/// go to the earliest candidate. The re-noising seed of a candidate depends
/// only on `options.seed` and its settings, so permuting the list permutes
/// the table.
pub fn auto_expose(
    model: &SimulatorModel,
    raw_in: &RawImage,
    candidates: &[ExposureSettings],
    scorer: &dyn Scorer,
    options: &SimulateOptions,
) -> Result<AutoExposeResult> {
    if candidates.is_empty() {
        return Err(Error::param("auto-exposure needs at least one candidate"));
    }
    let table = candidates
        .par_iter()
        .map_init(
            || model.clone(),
            |m, s| {
                let o = SimulateOptions {
                    seed: settings_seed(options.seed, s),
                    ..*options
                };
                let out = simulate(m, raw_in, s, &o)?;
                let score = scorer.score(&out);
                if !score.is_finite() {
                    return Err(Error::Numeric(format!("scorer returned {score}")));
                }
                Ok(ExposureState { settings: *s, score })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for (i, st) in table.iter().enumerate() {
        if st.score < table[best_index].score {
            best_index = i;
        }
    }
    Ok(AutoExposeResult {
        best_index,
        best: table[best_index],
        table,
    })
}

/// 4 ISO × 4 exposure-time × 4 f-number levels, geometrically spaced over
/// the supported ranges. ISO is the slowest-varying axis.
pub fn default_candidate_grid(source: &ExposureSettings) -> Vec<ExposureSettings> {
    let geo = |(lo, hi): (f64, f64), k: usize| lo * (hi / lo).powf(k as f64 / 3.0);
    let mut out = Vec::with_capacity(64);
    for i in 0..4 {
        let iso = geo(ISO_RANGE, i).round();
        for t in 0..4 {
            for n in 0..4 {
                out.push(ExposureSettings {
                    exposure_time: geo(EXPOSURE_TIME_RANGE, t),
                    iso,
                    f_number: geo(F_NUMBER_RANGE, n),
                    nlf: nlf_at_iso(&source.nlf, source.iso, iso),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_settings;
    use crate::pipeline::{ModelConfig, StageToggles};
    use crate::raw::{compute_psnr, RawImage};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, v: u8) -> RgbImage {
        RgbImage::new(h, w, vec![v; h * w * 3]).unwrap()
    }

    #[test]
    fn zero_raw_renders_black() {
        let img = render_srgb(&RawImage::filled(3, 5, 0.0), &RenderParams::default()).unwrap();
        assert_eq!((img.height, img.width), (3, 5));
        assert!(img.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn linear_half_is_level_128() {
        let img = render_srgb(&RawImage::filled(2, 2, 0.5), &RenderParams::linear()).unwrap();
        assert!(img.data.iter().all(|&b| b == 128));
    }

    #[test]
    fn green_is_mean_of_both_planes() {
        let raw = RawImage::from_planes(1, 1, vec![0.0, 0.2, 0.6, 1.0]).unwrap();
        let img = render_srgb(&raw, &RenderParams::linear()).unwrap();
        assert_eq!(img.pixel(0, 0), [0, 102, 255]);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = RenderParams::default();
        p.gains[1] = 0.0;
        assert!(render_srgb(&RawImage::filled(1, 1, 0.1), &p).is_err());
    }

    #[test]
    fn bracket_example_plus_one_ev() {
        let nlf = NoiseLevelFunction::new(1e-5, 1e-3).unwrap();
        let src = ExposureSettings::new(0.01, 800.0, 8.0, nlf).unwrap();
        let plan = plan_hdr_bracket(&src).unwrap();
        assert_eq!(plan.len(), 17);
        assert_eq!(plan.first().unwrap().0, -4.0);
        assert_eq!(plan.last().unwrap().0, 4.0);
        let (_, t) = plan.iter().find(|(ev, _)| *ev == 1.0).unwrap();
        assert!((t.exposure_time - 0.16).abs() < 1e-15);
        assert_eq!(t.iso, 100.0);
        assert_eq!(t.f_number, 8.0);
        assert_eq!(t.nlf, nlf_at_iso(&nlf, 800.0, 100.0));
        for (ev, t) in &plan {
            assert_eq!(compute_alpha(&src, t).unwrap(), 2f64.powf(*ev));
        }
    }

    #[test]
    fn bracket_zero_ev_at_min_iso_is_source() {
        let src = ExposureSettings::new(1.0 / 60.0, 100.0, 5.6, NoiseLevelFunction::noiseless()).unwrap();
        let plan = plan_hdr_bracket(&src).unwrap();
        let (_, t) = plan.iter().find(|(ev, _)| *ev == 0.0).unwrap();
        assert_eq!(*t, src);
    }

    #[test]
    fn bracket_drops_out_of_range_times() {
        let src = ExposureSettings::new(1.0, 100.0, 8.0, NoiseLevelFunction::noiseless()).unwrap();
        let plan = plan_hdr_bracket(&src).unwrap();
        // 2^2 = 4 s is the longest allowed time.
        assert_eq!(plan.last().unwrap().0, 2.0);
        assert_eq!(plan.len(), 13);
    }

    #[test]
    fn fusing_identical_frames_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<u8> = (0..40 * 52 * 3).map(|_| rng.random()).collect();
        let f = RgbImage::new(40, 52, data).unwrap();
        let out = fuse_exposures(&[f.clone(), f.clone(), f.clone()], &FusionConfig::default()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn black_frame_barely_contributes() {
        let out = fuse_exposures(&[gray(20, 20, 0), gray(20, 20, 128)], &FusionConfig::default()).unwrap();
        assert!(out.data.iter().all(|&b| (118..=128).contains(&b)), "{:?}", &out.data[..6]);
    }

    #[test]
    fn fusion_rejects_mismatched_sizes() {
        let err = fuse_exposures(&[gray(4, 4, 0), gray(4, 5, 0)], &FusionConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn single_candidate_wins() {
        let model = SimulatorModel::new(ModelConfig::default()).unwrap();
        let raw = RawImage::filled(4, 4, 0.2).with_settings(synthetic_settings(0.01, 100.0, 8.0));
        let c = [synthetic_settings(4.0, 16000.0, 4.0)];
        let r = auto_expose(&model, &raw, &c, &HeuristicScorer::default(), &SimulateOptions::default()).unwrap();
        assert_eq!(r.best_index, 0);
        assert_eq!(r.table.len(), 1);
    }

    #[test]
    fn empty_candidates_rejected() {
        let model = SimulatorModel::new(ModelConfig::default()).unwrap();
        let raw = RawImage::filled(4, 4, 0.2);
        let err = auto_expose(&model, &raw, &[], &HeuristicScorer::default(), &SimulateOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    fn scene_raw() -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = (0..24 * 24 * PLANES).map(|_| rng.random_range(0.05..0.3)).collect();
        RawImage::from_planes(24, 24, data)
            .unwrap()
            .with_settings(synthetic_settings(0.01, 100.0, 8.0))
    }

    fn exposure_only() -> SimulateOptions {
        SimulateOptions {
            stages: StageToggles {
                exposure: true,
                noise: false,
                aperture: false,
            },
            ..SimulateOptions::default()
        }
    }

    #[test]
    fn saturating_candidate_scores_worse() {
        let model = SimulatorModel::new(ModelConfig::default()).unwrap();
        let raw = scene_raw();
        let mid = synthetic_settings(0.01, 100.0, 8.0);
        let hot = synthetic_settings(1.0, 1600.0, 4.0);
        let r = auto_expose(&model, &raw, &[hot, mid], &HeuristicScorer::default(), &exposure_only()).unwrap();
        assert!(r.table[0].score > r.table[1].score);
        assert_eq!(r.best_index, 1);
    }

    #[test]
    fn grid_has_64_states_inside_ranges() {
        let grid = default_candidate_grid(&synthetic_settings(0.01, 100.0, 8.0));
        assert_eq!(grid.len(), 64);
        for s in &grid {
            assert!(s.validate().is_ok());
            assert!(crate::dataset::range_warnings(s).is_empty(), "{s:?}");
        }
    }

    #[test]
    fn noise_estimate_tracks_sigma() {
        let clean = RawImage::filled(200, 200, 0.3);
        let noisy = crate::noise::synthesize_noise(&clean, &NoiseLevelFunction::new(1e-4, 0.0).unwrap(), 3).unwrap();
        let s = estimate_noise_sigma(&noisy);
        assert!((s / 0.01 - 1.0).abs() < 0.05, "{s}");
        assert!(compute_psnr(&clean, &noisy).unwrap() < 50.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn render_monotone_per_channel(seed in 0u64..10_000, gamma in 0.5f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..36 * PLANES).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(0.0..0.5)).collect();
            let params = RenderParams { gains: [1.7, 1.0, 1.3], matrix: IDENTITY, tone: ToneCurve::Gamma(gamma) };
            let ra = render_srgb(&RawImage::from_planes(6, 6, a).unwrap(), &params).unwrap();
            let rb = render_srgb(&RawImage::from_planes(6, 6, b).unwrap(), &params).unwrap();
            prop_assert!(ra.data.iter().zip(&rb.data).all(|(x, y)| x <= y));
        }

        #[test]
        fn fusion_weights_sum_to_one(seed in 0u64..10_000, n in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<RgbImage> = (0..n)
                .map(|_| RgbImage::new(5, 7, (0..105).map(|_| rng.random()).collect()).unwrap())
                .collect();
            let w = fusion_weights(&frames, &FusionConfig::default()).unwrap();
            for i in 0..35 {
                let s: f64 = w.iter().map(|m| m[i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn auto_expose_permutation_invariant(seed in 0u64..1000) {
            let model = SimulatorModel::new(ModelConfig::default()).unwrap();
            let raw = scene_raw().crop(0, 0, 8, 8).unwrap();
            let cands: Vec<ExposureSettings> = [0.001, 0.01, 0.1, 1.0]
                .iter()
                .map(|&t| synthetic_settings(t, 200.0, 8.0))
                .collect();
            let mut perm = cands.clone();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let o = exposure_only();
            let a = auto_expose(&model, &raw, &cands, &HeuristicScorer::default(), &o).unwrap();
            let b = auto_expose(&model, &raw, &perm, &HeuristicScorer::default(), &o).unwrap();
            for st in &b.table {
                let orig = a.table.iter().find(|x| x.settings == st.settings).unwrap();
                prop_assert_eq!(orig.score, st.score);
            }
            prop_assert_eq!(a.best.score, b.best.score);
        }
    }
}
