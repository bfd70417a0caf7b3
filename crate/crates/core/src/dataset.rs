//! On-disk raw sequences and the synthetic scene oracle.
//!
//! Raw container layout (little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `NRS1` |
//! | 4 | 2 | format version (1) |
//! | 6 | 4 | mosaic width |
//! | 10 | 4 | mosaic height |
//! | 14 | 1 | CFA code (0 RGGB, 1 BGGR, 2 GRBG, 3 GBRG) |
//! | 15 | 1 | reserved (0) |
//! | 16 | 2 | black level |
//! | 18 | 2 | white level |
//! | 20 | 2·W·H | row-major `u16` digital numbers |
//!
//! Each frame has a text sidecar of `key = value` lines next to it, and a
//! sequence directory lists its frames in a `manifest.txt`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exposure::compute_alpha;
use crate::noise::synthesize_noise;
use crate::raw::{
    clip_unit, pack_bayer, unpack_bayer, CfaOrder, ExposureSettings, Mosaic, NoiseLevelFunction, RawImage, PLANES,
};

pub const CONTAINER_MAGIC: &[u8; 4] = b"NRS1";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

pub const ISO_RANGE: (f64, f64) = (100.0, 16000.0);
pub const EXPOSURE_TIME_RANGE: (f64, f64) = (1.0 / 8000.0, 4.0);
pub const F_NUMBER_RANGE: (f64, f64) = (4.0, 22.0);

/// Black and white level of synthetic frames (14-bit sensor).
pub const SYNTHETIC_BLACK_LEVEL: u16 = 512;
pub const SYNTHETIC_WHITE_LEVEL: u16 = 16383;

const MANIFEST: &str = "manifest.txt";

/// Human-readable notes for settings outside the dataset's capture ranges.
pub fn range_warnings(s: &ExposureSettings) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
        if v < lo || v > hi {
            out.push(format!("{name} {v} outside [{lo}, {hi}]"));
        }
    };
    check("ISO", s.iso, ISO_RANGE);
    check("exposure time", s.exposure_time, EXPOSURE_TIME_RANGE);
    check("f-number", s.f_number, F_NUMBER_RANGE);
    out
}

/// Decoded raw container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawContainer {
    pub mosaic: Mosaic,
    pub cfa: CfaOrder,
    pub black_level: u16,
    pub white_level: u16,
}

impl RawContainer {
    pub fn from_raw(raw: &RawImage) -> Result<Self> {
        Ok(Self {
            mosaic: pack_bayer(raw)?,
            cfa: raw.cfa,
            black_level: raw.black_level,
            white_level: raw.white_level,
        })
    }

    pub fn to_raw(&self) -> Result<RawImage> {
        unpack_bayer(&self.mosaic, self.black_level, self.white_level, self.cfa)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.mosaic;
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * m.data.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(m.width as u32).to_le_bytes());
        out.extend_from_slice(&(m.height as u32).to_le_bytes());
        out.push(self.cfa.code());
        out.push(0);
        out.extend_from_slice(&self.black_level.to_le_bytes());
        out.extend_from_slice(&self.white_level.to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |end: usize, what: &str| {
            if bytes.len() < end {
                Err(Error::format(
                    bytes.len() as u64,
                    format!("file ends inside the {what} (needs {end} bytes, has {})", bytes.len()),
                ))
            } else {
                Ok(())
            }
        };
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);

        need(4, "magic")?;
        if &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
        }
        need(6, "version")?;
        let version = u16_at(4);
        if version != CONTAINER_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        need(HEADER_LEN, "header")?;
        let width = u32_at(6) as usize;
        let height = u32_at(10) as usize;
        if width == 0 || !width.is_multiple_of(2) {
            return Err(Error::format(6, format!("width {width} must be positive and even")));
        }
        if height == 0 || !height.is_multiple_of(2) {
            return Err(Error::format(10, format!("height {height} must be positive and even")));
        }
        let cfa = CfaOrder::from_code(bytes[14]).ok_or_else(|| Error::format(14, format!("unknown CFA code {}", bytes[14])))?;
        if bytes[15] != 0 {
            return Err(Error::format(15, "reserved byte must be zero"));
        }
        let black_level = u16_at(16);
        let white_level = u16_at(18);
        if white_level <= black_level {
            return Err(Error::format(
                18,
                format!("white level {white_level} must exceed black level {black_level}"),
            ));
        }
        let payload = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| Error::format(6, "mosaic size overflows"))?;
        let end = HEADER_LEN + payload;
        need(end, "payload")?;
        if bytes.len() > end {
            return Err(Error::format(end as u64, format!("{} trailing bytes", bytes.len() - end)));
        }
        let data = bytes[HEADER_LEN..end]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(Self {
            mosaic: Mosaic::new(width, height, data)?,
            cfa,
            black_level,
            white_level,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<stream>", e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_raw_file(path: &Path, raw: &RawContainer) -> Result<()> {
    fs::write(path, raw.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_raw_file(path: &Path) -> Result<RawContainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawContainer::from_bytes(&bytes)
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; `path` only labels errors.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Text {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Text {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_key_values(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_number(path: &Path, key: &str, value: &str) -> Result<f64> {
    value.parse::<f64>().map_err(|_| Error::Text {
        path: path.to_path_buf(),
        line: 0,
        message: format!("key `{key}`: `{value}` is not a number"),
    })
}

/// Text metadata of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub settings: ExposureSettings,
    pub camera_id: String,
    pub scene_id: String,
    /// Keys this crate does not interpret, kept in file order.
    pub extra: Vec<(String, String)>,
}

const SIDECAR_KEYS: [&str; 7] = [
    "iso",
    "exposure_time_s",
    "f_number",
    "nlf_read",
    "nlf_shot",
    "camera_id",
    "scene_id",
];

impl Sidecar {
    pub fn to_text(&self) -> String {
        let s = &self.settings;
        let mut entries = vec![
            ("iso".to_string(), s.iso.to_string()),
            ("exposure_time_s".to_string(), s.exposure_time.to_string()),
            ("f_number".to_string(), s.f_number.to_string()),
            ("nlf_read".to_string(), s.nlf.read.to_string()),
            ("nlf_shot".to_string(), s.nlf.shot.to_string()),
            ("camera_id".to_string(), self.camera_id.clone()),
            ("scene_id".to_string(), self.scene_id.clone()),
        ];
        entries.extend(self.extra.iter().cloned());
        format_key_values(&entries)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let entries = parse_key_values(text, path)?;
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Text {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("missing key `{key}`"),
                })
        };
        let num = |key: &str| get(key).and_then(|v| parse_number(path, key, v));
        let settings = ExposureSettings {
            exposure_time: num("exposure_time_s")?,
            iso: num("iso")?,
            f_number: num("f_number")?,
            nlf: NoiseLevelFunction {
                read: num("nlf_read")?,
                shot: num("nlf_shot")?,
            },
        };
        settings.validate().map_err(|e| Error::Text {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(Self {
            settings,
            camera_id: get("camera_id")?.to_string(),
            scene_id: get("scene_id")?.to_string(),
            extra: entries
                .into_iter()
                .filter(|(k, _)| !SIDECAR_KEYS.contains(&k.as_str()))
                .collect(),
        })
    }
}

/// One registered capture of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub raw: RawContainer,
    pub settings: ExposureSettings,
    pub extra: Vec<(String, String)>,
}

impl SequenceFrame {
    /// Normalized planes labelled with the frame's settings.
    pub fn image(&self) -> Result<RawImage> {
        Ok(self.raw.to_raw()?.with_settings(self.settings))
    }
}

/// Registered captures of one static scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub scene_id: String,
    pub camera_id: String,
    pub illuminance_lux: Option<f64>,
    pub frames: Vec<SequenceFrame>,
}

impl SceneSequence {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::degenerate(format!("sequence {} has no frames", self.scene_id)))?;
        for (i, f) in self.frames.iter().enumerate() {
            let (a, b) = (&f.raw.mosaic, &first.raw.mosaic);
            if (a.width, a.height) != (b.width, b.height) || f.raw.cfa != first.raw.cfa {
                return Err(Error::degenerate(format!(
                    "sequence {}: frame {i} differs in size or CFA from frame 0",
                    self.scene_id
                )));
            }
            f.settings.validate()?;
        }
        Ok(())
    }

    pub fn images(&self) -> Result<Vec<RawImage>> {
        self.frames.iter().map(SequenceFrame::image).collect()
    }

    pub fn range_warnings(&self) -> Vec<String> {
        self.frames
            .iter()
            .enumerate()
            .flat_map(|(i, f)| range_warnings(&f.settings).into_iter().map(move |w| format!("frame {i}: {w}")))
            .collect()
    }
}

fn frame_stem(i: usize) -> String {
    format!("frame_{i:03}")
}

/// Writes `seq` into directory `dir` (created if missing).
pub fn write_sequence(seq: &SceneSequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = vec![
        ("format".to_string(), "camsim-sequence".to_string()),
        ("version".to_string(), "1".to_string()),
        ("scene_id".to_string(), seq.scene_id.clone()),
        ("camera_id".to_string(), seq.camera_id.clone()),
    ];
    if let Some(lux) = seq.illuminance_lux {
        manifest.push(("illuminance_lux".to_string(), lux.to_string()));
    }
    for (i, f) in seq.frames.iter().enumerate() {
        let stem = frame_stem(i);
        write_raw_file(&dir.join(format!("{stem}.nrs")), &f.raw)?;
        let sidecar = Sidecar {
            settings: f.settings,
            camera_id: seq.camera_id.clone(),
            scene_id: seq.scene_id.clone(),
            extra: f.extra.clone(),
        };
        let path = dir.join(format!("{stem}.txt"));
        fs::write(&path, sidecar.to_text()).map_err(|e| Error::io(&path, e))?;
        manifest.push(("frame".to_string(), stem));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, format_key_values(&manifest)).map_err(|e| Error::io(&path, e))
}

/// Reads a sequence directory. Settings outside the capture ranges are
/// logged as warnings.
pub fn read_sequence(dir: &Path) -> Result<SceneSequence> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_key_values(&text, &mpath)?;
    let text_err = |message: String| Error::Text {
        path: mpath.clone(),
        line: 0,
        message,
    };
    let lookup = |key: &str| entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    if lookup("format").as_deref() != Some("camsim-sequence") {
        return Err(text_err("not a sequence manifest".into()));
    }
    if lookup("version").as_deref() != Some("1") {
        return Err(text_err("unsupported manifest version".into()));
    }
    let illuminance_lux = lookup("illuminance_lux")
        .map(|v| parse_number(&mpath, "illuminance_lux", &v))
        .transpose()?;
    let mut frames = Vec::new();
    for (_, stem) in entries.iter().filter(|(k, _)| k == "frame") {
        if stem.contains(['/', '\\']) || stem.starts_with('.') {
            return Err(text_err(format!("frame name `{stem}` must be a plain file stem")));
        }
        let raw = read_raw_file(&dir.join(format!("{stem}.nrs")))?;
        let spath = dir.join(format!("{stem}.txt"));
        let stext = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
        let sidecar = Sidecar::parse(&stext, &spath)?;
        frames.push(SequenceFrame {
            raw,
            settings: sidecar.settings,
            extra: sidecar.extra,
        });
    }
    let seq = SceneSequence {
        scene_id: lookup("scene_id").ok_or_else(|| text_err("missing scene_id".into()))?,
        camera_id: lookup("camera_id").ok_or_else(|| text_err("missing camera_id".into()))?,
        illuminance_lux,
        frames,
    };
    seq.validate()?;
    for w in seq.range_warnings() {
        log::warn!("{}: {w}", dir.display());
    }
    Ok(seq)
}

/// Lists sequence directories (those holding a manifest) directly under
/// `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join(MANIFEST).is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Synthetic per-ISO noise calibration: `read = 1e-6·(g/100)²`,
/// `shot = 1e-4·(g/100)`.
pub fn synthetic_nlf(iso: f64) -> NoiseLevelFunction {
    let r = iso / 100.0;
    NoiseLevelFunction {
        read: 1e-6 * r * r,
        shot: 1e-4 * r,
    }
}

/// Synthetic settings with the matching [`synthetic_nlf`].
pub fn synthetic_settings(exposure_time: f64, iso: f64, f_number: f64) -> ExposureSettings {
    ExposureSettings {
        exposure_time,
        iso,
        f_number,
        nlf: synthetic_nlf(iso),
    }
}

/// Knobs of [`generate_synthetic_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    /// Mosaic height and width (even); planes are half that.
    pub height: usize,
    pub width: usize,
    /// 0 gives a constant, in-focus scene; higher values add more objects.
    pub complexity: u32,
    /// Largest blur radius at f/4, in plane pixels.
    pub max_blur_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            complexity: 4,
            max_blur_radius: 8.0,
        }
    }
}

/// Latent scene: radiance at the reference exposure, depth and focus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    /// `(height, width, 4)` interleaved, non-negative.
    pub radiance: Vec<f64>,
    /// Metres, `(height, width)`.
    pub depth: Vec<f64>,
    pub focus_distance: f64,
    /// Blur radius at f-number `n` is `k·|1/d − 1/d_f| / n`.
    pub blur_constant: f64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    freq: f64,
    angle: f64,
    amplitude: f64,
}

impl Texture {
    fn at(&self, y: f64, x: f64) -> f64 {
        let t = x * self.angle.cos() + y * self.angle.sin();
        1.0 + self.amplitude * (self.freq * t).sin()
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

/// Piecewise-smooth random scene: a smooth background, textured discs and
/// rectangles at layered depths, and a focus plane on one of the layers.
pub fn generate_synthetic_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    if config.height == 0 || config.width == 0 || !config.height.is_multiple_of(2) || !config.width.is_multiple_of(2) {
        return Err(Error::dim(format!(
            "scene size {}x{} must be positive and even",
            config.height, config.width
        )));
    }
    if !(config.max_blur_radius >= 0.0 && config.max_blur_radius.is_finite()) {
        return Err(Error::param("maximum blur radius must be >= 0"));
    }
    let (h, w) = (config.height / 2, config.width / 2);
    if config.complexity == 0 {
        return Ok(SyntheticScene {
            height: h,
            width: w,
            radiance: vec![0.25; h * w * PLANES],
            depth: vec![3.0; h * w],
            focus_distance: 3.0,
            blur_constant: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint = |rng: &mut ChaCha8Rng| {
        let g = rng.random_range(0.8..1.2);
        [rng.random_range(0.5..1.2), g, g, rng.random_range(0.5..1.2)]
    };
    let background_depth = 12.0;
    let bg_level = log_uniform(&mut rng, 0.01, 0.1);
    let bg_tint = tint(&mut rng);
    let (gy, gx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let bg_texture = Texture {
        freq: rng.random_range(10.0..40.0),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        amplitude: 0.3,
    };

    struct Object {
        shape: Shape,
        level: f64,
        tint: [f64; 4],
        depth: f64,
        texture: Option<Texture>,
    }
    let count = 3 * config.complexity as usize;
    let mut objects: Vec<Object> = (0..count)
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let size = rng.random_range(0.05..0.25);
            let shape = if rng.random_bool(0.5) {
                Shape::Disc { cy, cx, r: size }
            } else {
                let aspect = rng.random_range(0.5..2.0);
                Shape::Rect {
                    y0: cy - size * aspect,
                    x0: cx - size / aspect,
                    y1: cy + size * aspect,
                    x1: cx + size / aspect,
                }
            };
            Object {
                shape,
                level: log_uniform(&mut rng, 0.004, 0.8),
                tint: tint(&mut rng),
                depth: rng.random_range(1.0..8.0),
                texture: rng.random_bool(0.75).then(|| Texture {
                    freq: rng.random_range(20.0..120.0),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    amplitude: rng.random_range(0.3..0.9),
                }),
            }
        })
        .collect();
    // Far objects first so nearer ones occlude them.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let focus_distance = objects[rng.random_range(0..objects.len())].depth;

    let mut radiance = vec![0.0; h * w * PLANES];
    let mut depth = vec![background_depth; h * w];
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let mut level = bg_level * 10f64.powf(0.5 * (gy * y + gx * x)) * bg_texture.at(y, x);
            let mut t = bg_tint;
            for o in &objects {
                if o.shape.contains(y, x) {
                    level = o.level * o.texture.map_or(1.0, |tx| tx.at(y, x));
                    t = o.tint;
                    depth[i * w + j] = o.depth;
                }
            }
            for c in 0..PLANES {
                radiance[(i * w + j) * PLANES + c] = (level * t[c]).max(0.0);
            }
        }
    }
    let spread = depth
        .iter()
        .map(|d| (1.0 / d - 1.0 / focus_distance).abs())
        .fold(0.0f64, f64::max);
    let blur_constant = if spread > 0.0 {
        config.max_blur_radius * 4.0 / spread
    } else {
        0.0
    };
    Ok(SyntheticScene {
        height: h,
        width: w,
        radiance,
        depth,
        focus_distance,
        blur_constant,
    })
}

impl SyntheticScene {
    /// Per-pixel disc radius at `f_number`, in plane pixels.
    pub fn blur_radius_map(&self, f_number: f64) -> Vec<f64> {
        self.depth
            .iter()
            .map(|d| self.blur_constant * (1.0 / d - 1.0 / self.focus_distance).abs() / f_number)
            .collect()
    }

    /// Radiance blurred as seen through aperture `f_number`.
    pub fn defocused(&self, f_number: f64) -> Vec<f64> {
        disc_blur(&self.radiance, self.height, self.width, &self.blur_radius_map(f_number))
    }
}

/// Anti-aliased disc weight at distance `dist` from the centre.
#[inline]
fn disc_weight(radius: f64, dist: f64) -> f64 {
    (radius + 0.5 - dist).clamp(0.0, 1.0)
}

/// Normalized disc kernel of the given radius as a square of side
/// `2·ceil(radius + 0.5) − 1`, row-major.
pub fn disc_kernel(radius: f64) -> (usize, Vec<f64>) {
    let reach = (radius + 0.5).ceil() as isize - 1;
    let side = (2 * reach + 1) as usize;
    let mut k = Vec::with_capacity(side * side);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            k.push(disc_weight(radius, ((dy * dy + dx * dx) as f64).sqrt()));
        }
    }
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    (side, k)
}

/// Gathers each output pixel from a disc of its own radius, with clamped
/// borders. Planes are blurred independently.
pub fn disc_blur(planes: &[f64], height: usize, width: usize, radius: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; planes.len()];
    out.par_chunks_mut(width * PLANES).enumerate().for_each(|(i, row)| {
        for j in 0..width {
            let r = radius[i * width + j];
            let reach = (r + 0.5).ceil() as isize - 1;
            let mut acc = [0.0; PLANES];
            let mut total = 0.0;
            for dy in -reach..=reach {
                let y = (i as isize + dy).clamp(0, height as isize - 1) as usize;
                for dx in -reach..=reach {
                    let wgt = disc_weight(r, ((dy * dy + dx * dx) as f64).sqrt());
                    if wgt == 0.0 {
                        continue;
                    }
                    let x = (j as isize + dx).clamp(0, width as isize - 1) as usize;
                    let src = &planes[(y * width + x) * PLANES..][..PLANES];
                    for c in 0..PLANES {
                        acc[c] += wgt * src[c];
                    }
                    total += wgt;
                }
            }
            for c in 0..PLANES {
                row[j * PLANES + c] = acc[c] / total;
            }
        }
    });
    out
}

/// Renders the scene under settings `s`: defocus at `s.f_number`, exposure
/// scaling by `compute_alpha(reference, s)`, clipping, then noise from
/// `s.nlf`.
pub fn render_with_settings(
    scene: &SyntheticScene,
    s: &ExposureSettings,
    reference: &ExposureSettings,
    seed: u64,
) -> Result<RawImage> {
    let alpha = compute_alpha(reference, s)?;
    let clean: Vec<f64> = scene.defocused(s.f_number).iter().map(|&v| clip_unit(v * alpha)).collect();
    let clean = RawImage::from_planes(scene.height, scene.width, clean)?
        .with_levels(SYNTHETIC_BLACK_LEVEL, SYNTHETIC_WHITE_LEVEL)
        .with_settings(*s);
    synthesize_noise(&clean, &s.nlf, seed)
}

/// Renders a registered sequence of the scene, one frame per setting.
pub fn synthetic_sequence(
    scene: &SyntheticScene,
    settings: &[ExposureSettings],
    reference: &ExposureSettings,
    seed: u64,
    scene_id: &str,
) -> Result<SceneSequence> {
    let frames = settings
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let img = render_with_settings(scene, s, reference, seed.wrapping_add(i as u64))?;
            Ok(SequenceFrame {
                raw: RawContainer::from_raw(&img)?,
                settings: *s,
                extra: vec![("synthetic".to_string(), "true".to_string())],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSequence {
        scene_id: scene_id.to_string(),
        camera_id: "synthetic".to_string(),
        illuminance_lux: None,
        frames,
    })
}
