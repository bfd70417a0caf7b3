//! Raw image representation: Bayer packing, normalization, over-exposure
//! masking and full-reference quality metrics.
//!
//! A [`RawImage`] is the half-resolution, four-plane view of a Bayer mosaic.
//! Planes are always stored in canonical `R, G1, G2, B` order; the
//! [`CfaOrder`] records where each plane lives inside the 2×2 tile of the
//! originating sensor so that packing can restore the mosaic.
//!
//! Metrics are computed on the normalized raw planes, not on rendered sRGB.

use crate::error::{Error, Result};

/// Number of planes in an unpacked Bayer image.
pub const PLANES: usize = 4;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Side of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Arrangement of the 2×2 colour filter tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CfaOrder {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaOrder {
    pub const ALL: [CfaOrder; 4] = [CfaOrder::Rggb, CfaOrder::Bggr, CfaOrder::Grbg, CfaOrder::Gbrg];

    /// Offset `(row, col)` inside the 2×2 tile of canonical plane `c`
    /// (`0 = R, 1 = G1, 2 = G2, 3 = B`).
    pub fn offset(self, plane: usize) -> (usize, usize) {
        let table = match self {
            CfaOrder::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            CfaOrder::Bggr => [(1, 1), (0, 1), (1, 0), (0, 0)],
            CfaOrder::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            CfaOrder::Gbrg => [(1, 0), (0, 0), (1, 1), (0, 1)],
        };
        table[plane]
    }

    /// Code used by the on-disk container.
    pub fn code(self) -> u8 {
        match self {
            CfaOrder::Rggb => 0,
            CfaOrder::Bggr => 1,
            CfaOrder::Grbg => 2,
            CfaOrder::Gbrg => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Affine signal-to-variance map `σ²(x) = read + shot·x` in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseLevelFunction {
    /// Signal-independent variance (read noise).
    pub read: f64,
    /// Variance per unit of signal (shot noise).
    pub shot: f64,
}

impl NoiseLevelFunction {
    pub fn new(read: f64, shot: f64) -> Result<Self> {
        let nlf = Self { read, shot };
        nlf.validate()?;
        Ok(nlf)
    }

    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.read.is_finite() && self.read >= 0.0) {
            return Err(Error::param(format!("read variance {} must be >= 0", self.read)));
        }
        if !(self.shot.is_finite() && self.shot >= 0.0) {
            return Err(Error::param(format!("shot coefficient {} must be >= 0", self.shot)));
        }
        Ok(())
    }

    /// Predicted variance at signal level `x`, floored at zero.
    #[inline]
    pub fn variance(&self, x: f64) -> f64 {
        (self.read + self.shot * x).max(0.0)
    }
}

/// Capture settings of one raw frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureSettings {
    /// Exposure time in seconds.
    pub exposure_time: f64,
    /// ISO number.
    pub iso: f64,
    /// Aperture f-number.
    pub f_number: f64,
    /// Noise level function calibrated for `iso`.
    pub nlf: NoiseLevelFunction,
}

impl ExposureSettings {
    pub fn new(exposure_time: f64, iso: f64, f_number: f64, nlf: NoiseLevelFunction) -> Result<Self> {
        let s = Self {
            exposure_time,
            iso,
            f_number,
            nlf,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("exposure time", self.exposure_time),
            ("ISO", self.iso),
            ("f-number", self.f_number),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} {v} must be positive")));
            }
        }
        self.nlf.validate()
    }

    pub fn with_nlf(mut self, nlf: NoiseLevelFunction) -> Self {
        self.nlf = nlf;
        self
    }
}

impl Default for ExposureSettings {
    fn default() -> Self {
        Self {
            exposure_time: 0.01,
            iso: 100.0,
            f_number: 4.0,
            nlf: NoiseLevelFunction::default(),
        }
    }
}

/// Integer Bayer mosaic as read from the sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mosaic {
    pub width: usize,
    pub height: usize,
    /// Row-major digital numbers.
    pub data: Vec<u16>,
}

impl Mosaic {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "mosaic buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }
}

/// Half-resolution four-plane raw image, normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    height: usize,
    width: usize,
    /// `(height, width, 4)` row-major, planes interleaved.
    data: Vec<f64>,
    pub cfa: CfaOrder,
    pub black_level: u16,
    pub white_level: u16,
    pub settings: ExposureSettings,
}

impl RawImage {
    /// Builds an image from interleaved plane data. Values are not clamped.
    pub fn from_planes(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * PLANES {
            return Err(Error::dim(format!(
                "plane buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                PLANES
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            cfa: CfaOrder::Rggb,
            black_level: 0,
            white_level: u16::MAX,
            settings: ExposureSettings::default(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::from_planes(height, width, vec![value; height * width * PLANES]).expect("sized")
    }

    /// Copy of `self` with the same metadata and new pixel data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::dim("replacement data has a different size"));
        }
        Ok(Self {
            data,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: Vec::new(),
            cfa: self.cfa,
            black_level: self.black_level,
            white_level: self.white_level,
            settings: self.settings,
        }
    }

    pub fn with_settings(mut self, settings: ExposureSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_levels(mut self, black_level: u16, white_level: u16) -> Self {
        self.black_level = black_level;
        self.white_level = white_level;
        self
    }

    /// Height of the half-resolution planes.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Width of the half-resolution planes.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, PLANES)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, plane: usize) -> f64 {
        self.data[(row * self.width + col) * PLANES + plane]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, plane: usize, v: f64) {
        self.data[(row * self.width + col) * PLANES + plane] = v;
    }

    pub fn same_shape(&self, other: &RawImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &RawImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clip(mut self) -> Self {
        for v in &mut self.data {
            *v = clip_unit(*v);
        }
        self
    }

    /// Crops a `size_h × size_w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(Error::dim("crop window exceeds image"));
        }
        let mut data = Vec::with_capacity(size_h * size_w * PLANES);
        for r in row..row + size_h {
            let start = (r * self.width + col) * PLANES;
            data.extend_from_slice(&self.data[start..start + size_w * PLANES]);
        }
        Ok(Self {
            height: size_h,
            width: size_w,
            data,
            ..self.clone_meta()
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// `min(max(y, 0), 1)`.
#[inline]
pub fn clip_unit(y: f64) -> f64 {
    y.clamp(0.0, 1.0)
}

fn check_levels(black_level: u16, white_level: u16) -> Result<()> {
    if white_level <= black_level {
        return Err(Error::param(format!(
            "white level {white_level} must exceed black level {black_level}"
        )));
    }
    Ok(())
}

/// Splits a Bayer mosaic into four half-resolution planes, subtracting the
/// black level and normalizing to `[0, 1]`. Out-of-range DNs are clamped.
pub fn unpack_bayer(mosaic: &Mosaic, black_level: u16, white_level: u16, cfa: CfaOrder) -> Result<RawImage> {
    if !mosaic.width.is_multiple_of(2) || !mosaic.height.is_multiple_of(2) {
        return Err(Error::dim(format!(
            "mosaic dimensions {}x{} must be even",
            mosaic.width, mosaic.height
        )));
    }
    check_levels(black_level, white_level)?;
    let (h, w) = (mosaic.height / 2, mosaic.width / 2);
    let range = f64::from(white_level - black_level);
    let black = f64::from(black_level);
    let mut data = vec![0.0; h * w * PLANES];
    let offsets: [(usize, usize); PLANES] = std::array::from_fn(|c| cfa.offset(c));
    for i in 0..h {
        for j in 0..w {
            for (c, &(di, dj)) in offsets.iter().enumerate() {
                let dn = f64::from(mosaic.get(2 * i + di, 2 * j + dj));
                data[(i * w + j) * PLANES + c] = clip_unit((dn - black) / range);
            }
        }
    }
    let mut img = RawImage::from_planes(h, w, data)?;
    img.cfa = cfa;
    img.black_level = black_level;
    img.white_level = white_level;
    Ok(img)
}

/// Re-interleaves the planes into a Bayer mosaic, rounding to the nearest DN
/// and clamping into `[black_level, white_level]`.
pub fn pack_bayer(raw: &RawImage) -> Result<Mosaic> {
    check_levels(raw.black_level, raw.white_level)?;
    let (h, w) = (raw.height, raw.width);
    let black = f64::from(raw.black_level);
    let range = f64::from(raw.white_level - raw.black_level);
    let mut mosaic = Mosaic::filled(2 * w, 2 * h, raw.black_level);
    for i in 0..h {
        for j in 0..w {
            for c in 0..PLANES {
                let (di, dj) = raw.cfa.offset(c);
                let dn = (black + clip_unit(raw.get(i, j, c)) * range).round();
                let dn = dn.clamp(black, f64::from(raw.white_level));
                mosaic.data[(2 * i + di) * (2 * w) + 2 * j + dj] = dn as u16;
            }
        }
    }
    Ok(mosaic)
}

/// Marks pixels whose normalized value exceeds `threshold`. Layout matches
/// [`RawImage::data`].
pub fn overexposure_mask(raw: &RawImage, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::param(format!("threshold {threshold} must lie in (0, 1]")));
    }
    Ok(raw.data.iter().map(|&v| v > threshold).collect())
}

/// Mean squared error between two same-shaped images.
pub fn mse(a: &RawImage, b: &RawImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean absolute error between two same-shaped images.
pub fn mean_abs_error(a: &RawImage, b: &RawImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn compute_psnr(a: &RawImage, b: &RawImage) -> Result<f64> {
    let e = mse(a, b)?;
    if e <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over the four planes, using a uniform 7×7 window evaluated at
/// every position where it fits entirely inside the image. Local moments use
/// population (1/N) normalization.
pub fn compute_ssim(a: &RawImage, b: &RawImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.height, a.width
        )));
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (h, w) = (a.height, a.width);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for c in 0..PLANES {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * PLANES + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * PLANES + c]).collect();
        let sa = box_sums(&pa, h, w, SSIM_WINDOW);
        let sb = box_sums(&pb, h, w, SSIM_WINDOW);
        let saa = box_sums(&pa.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, SSIM_WINDOW);
        let sbb = box_sums(&pb.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, SSIM_WINDOW);
        let sab = box_sums(&pa.iter().zip(&pb).map(|(x, y)| x * y).collect::<Vec<_>>(), h, w, SSIM_WINDOW);
        let mut acc = 0.0;
        for k in 0..sa.len() {
            let mu_a = sa[k] / n;
            let mu_b = sb[k] / n;
            let var_a = saa[k] / n - mu_a * mu_a;
            let var_b = sbb[k] / n - mu_b * mu_b;
            let cov = sab[k] / n - mu_a * mu_b;
            acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
        total += acc / sa.len() as f64;
    }
    Ok(total / PLANES as f64)
}

/// Sums over every fully contained `k × k` window (valid positions only).
fn box_sums(plane: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = line[c..c + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (r..r + k).map(|rr| rows[rr * ow + c]).sum();
        }
    }
    out
}
