//! Stage 1: luminance scaling between capture settings.
//!
//! The physical multiplier combines exposure time, ISO gain and aperture area.
//! Aperture f-numbers are snapped to integer third-stops before use, since
//! camera metadata stores rounded values (`2.8` for `√2³`). A two-parameter
//! linear refinement `(w, b)` absorbs shutter bias and black-level error.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::raw::{clip_unit, ExposureSettings, RawImage};

/// Pixels above this normalized value are treated as clipped.
pub const OVEREXPOSURE_THRESHOLD: f64 = 0.99;

/// Bound on the black-level compensation term.
pub const MAX_BLACK_OFFSET: f64 = 0.1;

/// Learned refinement of the physical multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureCorrection {
    /// Gain refinement, `α̂ = w·α`.
    pub w: f64,
    /// Additive offset applied before scaling, in normalized units.
    pub b: f64,
}

impl Default for ExposureCorrection {
    fn default() -> Self {
        Self { w: 1.0, b: 0.0 }
    }
}

impl ExposureCorrection {
    pub fn new(w: f64, b: f64) -> Result<Self> {
        let c = Self { w, b };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w > 0.0) {
            return Err(Error::param(format!("gain refinement w = {} must be positive", self.w)));
        }
        if !(self.b.is_finite() && self.b.abs() < MAX_BLACK_OFFSET) {
            return Err(Error::param(format!(
                "offset b = {} outside (-{MAX_BLACK_OFFSET}, {MAX_BLACK_OFFSET})",
                self.b
            )));
        }
        Ok(())
    }
}

/// Third-stop index of an f-number: `round(6·log₂ n)`, half away from zero.
pub fn fnumber_to_stop(f_number: f64) -> Result<i32> {
    if !(f_number.is_finite() && f_number > 0.0) {
        return Err(Error::param(format!("f-number {f_number} must be positive")));
    }
    Ok((6.0 * f_number.log2()).round() as i32)
}

/// Ordering key used to pick the forward direction of a settings pair.
fn canonical_cmp(a: &ExposureSettings, sa: i32, b: &ExposureSettings, sb: i32) -> Ordering {
    a.exposure_time
        .total_cmp(&b.exposure_time)
        .then(a.iso.total_cmp(&b.iso))
        .then(sb.cmp(&sa))
}

/// Finds `(a, b)` with `a` within a few ulps of `value` such that the
/// floating-point product `a·b` is exactly one.
fn reciprocal_pair(value: f64) -> (f64, f64) {
    if value == 1.0 {
        return (1.0, 1.0);
    }
    let mut candidates = vec![value];
    let (mut up, mut down) = (value, value);
    for _ in 0..8 {
        up = next_up(up);
        down = next_down(down);
        candidates.push(up);
        candidates.push(down);
    }
    for a in candidates {
        let inv = 1.0 / a;
        let (mut up, mut down) = (inv, inv);
        if a * inv == 1.0 {
            return (a, inv);
        }
        for _ in 0..4 {
            up = next_up(up);
            down = next_down(down);
            if a * up == 1.0 {
                return (a, up);
            }
            if a * down == 1.0 {
                return (a, down);
            }
        }
    }
    (value, 1.0 / value)
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Luminance multiplier from `input` to `output` settings:
/// `α = (t₂/t₁)·(g₂/g₁)·2^((s₁−s₂)/3)`.
///
/// The two directions of a pair are computed together so that
/// `compute_alpha(a, b) * compute_alpha(b, a) == 1.0` holds bit-exactly;
/// each direction differs from the real-valued multiplier by at most a few
/// ulps.
pub fn compute_alpha(input: &ExposureSettings, output: &ExposureSettings) -> Result<f64> {
    input.validate()?;
    output.validate()?;
    let s_in = fnumber_to_stop(input.f_number)?;
    let s_out = fnumber_to_stop(output.f_number)?;
    let (from, s_from, to, s_to, forward) = match canonical_cmp(input, s_in, output, s_out) {
        Ordering::Equal => return Ok(1.0),
        Ordering::Less => (input, s_in, output, s_out, true),
        Ordering::Greater => (output, s_out, input, s_in, false),
    };
    let alpha_t = to.exposure_time / from.exposure_time;
    let alpha_g = to.iso / from.iso;
    let alpha_n = 2f64.powf(f64::from(s_from - s_to) / 3.0);
    let (a, b) = reciprocal_pair(alpha_t * alpha_g * alpha_n);
    Ok(if forward { a } else { b })
}

/// `clip((I + b)·w·α)`, relabelled with the `target` settings.
pub fn apply_exposure(
    raw: &RawImage,
    alpha: f64,
    corr: &ExposureCorrection,
    target: &ExposureSettings,
) -> Result<RawImage> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::param(format!("multiplier {alpha} must be positive")));
    }
    let gain = corr.w * alpha;
    let data = raw.data().iter().map(|&x| clip_unit((x + corr.b) * gain)).collect();
    Ok(raw.with_data(data)?.with_settings(*target))
}

/// One training example for the linear refinement.
#[derive(Debug, Clone, Copy)]
pub struct ExposurePair<'a> {
    pub input: &'a RawImage,
    pub target: &'a RawImage,
    /// Physical multiplier from the input to the target settings.
    pub alpha: f64,
}

/// Result of [`fit_exposure_correction`].
#[derive(Debug, Clone)]
pub struct ExposureFit {
    pub correction: ExposureCorrection,
    /// Mean absolute error over unmasked pixels at every accepted iterate,
    /// starting from the `(1, 0)` initialization.
    pub objective_history: Vec<f64>,
    pub used_pixels: usize,
}

struct Sample {
    /// `α·x`
    ax: f64,
    alpha: f64,
    y: f64,
}

/// Fits a single camera-wide `(w, b)` by least absolute deviations over all
/// unmasked pixels of all pairs.
///
/// In the unclipped regime the model `α(x + b)w` is linear in `(p, q) =
/// (w, w·b)`, so the objective is convex. It is minimized by iteratively
/// reweighted least squares with a backtracking safeguard; every accepted
/// iterate has an objective no larger than the previous one. Pixels where the
/// input or the target exceeds [`OVEREXPOSURE_THRESHOLD`] are excluded.
pub fn fit_exposure_correction(pairs: &[ExposurePair<'_>]) -> Result<ExposureFit> {
    if pairs.is_empty() {
        return Err(Error::degenerate("no exposure pairs"));
    }
    let mut samples = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        pair.input.ensure_same_shape(pair.target)?;
        if !(pair.alpha.is_finite() && pair.alpha > 0.0) {
            return Err(Error::param(format!("pair {k}: multiplier {} must be positive", pair.alpha)));
        }
        for (&x, &y) in pair.input.data().iter().zip(pair.target.data()) {
            if x > OVEREXPOSURE_THRESHOLD || y > OVEREXPOSURE_THRESHOLD {
                continue;
            }
            samples.push(Sample {
                ax: pair.alpha * x,
                alpha: pair.alpha,
                y,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::degenerate("every pixel is over-exposed"));
    }

    let objective = |p: f64, q: f64| -> f64 {
        samples.iter().map(|s| (s.ax * p + s.alpha * q - s.y).abs()).sum::<f64>() / samples.len() as f64
    };

    let (mut p, mut q) = (1.0, 0.0);
    let mut current = objective(p, q);
    let mut history = vec![current];
    const MAX_ITERS: usize = 200;
    const ETA: f64 = 1e-12;
    for _ in 0..MAX_ITERS {
        if current == 0.0 {
            break;
        }
        // Weighted normal equations for the 2x2 system.
        let (mut s_xx, mut s_x1, mut s_11, mut s_xy, mut s_1y) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in &samples {
            let r = s.ax * p + s.alpha * q - s.y;
            let wgt = 1.0 / r.abs().max(ETA);
            s_xx += wgt * s.ax * s.ax;
            s_x1 += wgt * s.ax * s.alpha;
            s_11 += wgt * s.alpha * s.alpha;
            s_xy += wgt * s.ax * s.y;
            s_1y += wgt * s.alpha * s.y;
        }
        let det = s_xx * s_11 - s_x1 * s_x1;
        if !(det.is_finite()) || det.abs() <= 1e-14 * (s_xx * s_11).abs() {
            return Err(Error::degenerate(
                "unmasked inputs have no intensity variation; gain and offset are not identifiable",
            ));
        }
        let p_new = (s_xy * s_11 - s_x1 * s_1y) / det;
        let q_new = (s_xx * s_1y - s_x1 * s_xy) / det;

        // Backtrack along the IRLS direction until the objective does not grow.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cp = p + step * (p_new - p);
            let cq = q + step * (q_new - q);
            let val = objective(cp, cq);
            if val <= current {
                accepted = Some((cp, cq, val));
                break;
            }
            step *= 0.5;
        }
        let Some((np, nq, val)) = accepted else { break };
        let improvement = current - val;
        p = np;
        q = nq;
        current = val;
        history.push(current);
        if improvement <= 1e-15 * current.max(1e-300) {
            break;
        }
    }

    let w = p;
    let b = if w != 0.0 { q / w } else { f64::NAN };
    let correction = ExposureCorrection { w, b };
    correction.validate().map_err(|e| Error::Numeric(format!("fit left the valid region: {e}")))?;
    Ok(ExposureFit {
        correction,
        objective_history: history,
        used_pixels: samples.len(),
    })
}
